//! Multi-frame fusion: align the frames of a sequence onto its reference
//! frame, union the points with provenance, smooth depth outliers, and cut
//! occlusion-style patches out of depth maps for augmentation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{DepthMap, PointCloud};
use crate::pose::{apply_transform, RigidTransform};
use crate::synth::FrameSequence;

/// Lateral neighborhood radius for depth smoothing, in mm.
pub const DENOISE_RADIUS_MM: f64 = 3.0;

/// A depth value farther than this from its neighborhood mean is replaced.
pub const DENOISE_THRESHOLD_MM: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("sequence has {frames} frames, so {expected} transforms are required, got {got}")]
    IndexMismatch { frames: usize, expected: usize, got: usize },
}

/// The union of a sequence's frames in reference-frame coordinates.
///
/// `source_frame[i]` is the frame index the i-th point came from;
/// `denoised[i]` marks points whose depth was replaced by [`denoise`].
/// The point count always equals the sum of the input frame counts.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedCloud {
    pub points: PointCloud,
    pub source_frame: Vec<usize>,
    pub denoised: Vec<bool>,
}

/// Aligns every non-reference frame onto the reference frame and unions
/// the result, keeping frame order and per-point provenance.
///
/// `transforms` carries one source-to-reference motion per non-reference
/// frame, ordered by ascending frame index with the reference skipped.
/// The reference frame itself joins untransformed.
pub fn fuse_sequence(
    seq: &FrameSequence,
    transforms: &[RigidTransform],
) -> Result<FusedCloud, FusionError> {
    let frames = seq.frames.len();
    let expected = frames.saturating_sub(1);
    if transforms.len() != expected {
        return Err(FusionError::IndexMismatch { frames, expected, got: transforms.len() });
    }
    let total: usize = seq.frames.iter().map(|f| f.len()).sum();
    let mut points = Vec::with_capacity(total);
    let mut source_frame = Vec::with_capacity(total);
    let mut next_transform = 0usize;
    for (f, frame) in seq.frames.iter().enumerate() {
        if f == seq.reference_index {
            points.extend_from_slice(&frame.points);
        } else {
            let moved = apply_transform(&transforms[next_transform], frame);
            next_transform += 1;
            points.extend_from_slice(&moved.points);
        }
        source_frame.extend(std::iter::repeat(f).take(frame.len()));
    }
    let denoised = vec![false; points.len()];
    let mut cloud = PointCloud::new(points);
    cloud.id = seq.frames[seq.reference_index].id.clone();
    cloud.frame_index = Some(seq.reference_index);
    Ok(FusedCloud { points: cloud, source_frame, denoised })
}

/// Replaces depth outliers by their lateral neighborhood mean.
///
/// For every point, the neighbors are all other points within `radius_mm`
/// in the x-y plane (boundary inclusive). When |z - mean| exceeds
/// `threshold_mm`, z becomes that mean; x and y never change, and points
/// without neighbors are left alone. All means are taken over a snapshot
/// of the input depths, so no update feeds into another and the result is
/// a pure function of the input point set: neighbor depths are summed in
/// sorted order, which makes the outcome independent of point order.
/// Output flags are the input flags with newly updated points added.
pub fn denoise(input: &FusedCloud, radius_mm: f64, threshold_mm: f64) -> FusedCloud {
    let pts = &input.points.points;
    let n = pts.len();
    let mut out = input.clone();
    if n < 2 || radius_mm <= 0.0 {
        return out;
    }

    // Uniform grid over x-y with cells of the neighborhood radius: all
    // neighbors of a point lie in its 3x3 cell block.
    let cell_of = |p: &[f64; 3]| -> (i64, i64) {
        (
            (p[0] / radius_mm).floor() as i64,
            (p[1] / radius_mm).floor() as i64,
        )
    };
    let mut grid: std::collections::HashMap<(i64, i64), Vec<u32>> = std::collections::HashMap::new();
    for (i, p) in pts.iter().enumerate() {
        grid.entry(cell_of(p)).or_default().push(i as u32);
    }

    let r2 = radius_mm * radius_mm;
    let mut neighbor_z: Vec<f64> = Vec::new();
    for i in 0..n {
        let p = &pts[i];
        neighbor_z.clear();
        let (cx, cy) = cell_of(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else { continue };
                for &j in bucket {
                    let j = j as usize;
                    if j == i {
                        continue;
                    }
                    let q = &pts[j];
                    let ddx = p[0] - q[0];
                    let ddy = p[1] - q[1];
                    if ddx * ddx + ddy * ddy <= r2 {
                        neighbor_z.push(q[2]);
                    }
                }
            }
        }
        if neighbor_z.is_empty() {
            continue;
        }
        neighbor_z.sort_by(f64::total_cmp);
        let mean: f64 = neighbor_z.iter().sum::<f64>() / neighbor_z.len() as f64;
        if (p[2] - mean).abs() > threshold_mm {
            out.points.points[i][2] = mean;
            out.denoised[i] = true;
        }
    }
    out
}

/// Occlusion-style augmentation settings.
///
/// `pose_jitter_deg` documents the cloud-level pose perturbation a caller
/// applies before rasterising (each Euler angle uniform in +-jitter);
/// the patch ranges drive [`augment_depth`] itself. Both ranges are
/// inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub pose_jitter_deg: f64,
    pub patch_count_range: (usize, usize),
    pub patch_size_range: (usize, usize),
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            pose_jitter_deg: 10.0,
            patch_count_range: (1, 6),
            patch_size_range: (0, 20),
            seed: 0,
        }
    }
}

/// Masks out k random axis-aligned square patches of a depth map.
///
/// Draws k from the spec's count range, then for each patch a side from
/// the size range and a top-left corner uniform over positions keeping
/// the square inside the map. Cleared pixels lose their mask bit and
/// their depth returns to the sentinel 0. Side-0 patches clear nothing.
pub fn augment_depth(map: &DepthMap, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> DepthMap {
    debug_assert!(spec.patch_count_range.0 <= spec.patch_count_range.1);
    debug_assert!(spec.patch_size_range.0 <= spec.patch_size_range.1);
    debug_assert!(spec.patch_count_range.0 >= 1);
    let res = map.resolution();
    let mut out = map.clone();
    let patches = rng.gen_range(spec.patch_count_range.0..=spec.patch_count_range.1);
    for _ in 0..patches {
        let side = rng
            .gen_range(spec.patch_size_range.0..=spec.patch_size_range.1)
            .min(res);
        // Corner draws stay in the stream even for empty patches, so the
        // patch sizes alone decide how much randomness is consumed.
        let row0 = rng.gen_range(0..=res - side);
        let col0 = rng.gen_range(0..=res - side);
        if side == 0 {
            continue;
        }
        for r in row0..row0 + side {
            for c in col0..col0 + side {
                let i = out.index(r, c);
                out.z_channel_mut()[i] = 0.0;
                out.mask_mut()[i] = false;
            }
        }
    }
    out
}
