//! Point clouds and their 2D map projections.
//!
//! A scan is an unordered list of xyz points in millimetres. For the
//! regressor it is flattened into a square coordinate map: an orthographic
//! projection along z onto an x-y grid centred at the cloud centroid, where
//! every valid pixel carries the X, Y, Z of a surface point. Pixels that
//! receive no point are filled by inverse-distance interpolation from
//! nearby occupied pixels up to a gap limit, and stay masked beyond it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default side length of a full-resolution coordinate map, in pixels.
pub const DEFAULT_MAP_RESOLUTION: usize = 256;

/// Default pixel pitch of a full-resolution map, in millimetres per pixel.
pub const DEFAULT_MAP_SCALE_MM: f64 = 0.9;

/// Number of occupied pixels blended into each interpolated pixel.
const INTERP_NEIGHBORS: usize = 4;

/// Maximum pixel distance an interpolated pixel may sit from its nearest
/// occupied pixel; anything further stays masked.
const GAP_LIMIT_PX: f64 = 6.0;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CloudError {
    #[error("operation requires a non-empty point cloud")]
    EmptyCloud,
    #[error("downsample factor {factor} does not divide resolution {resolution}")]
    BadFactor { factor: usize, resolution: usize },
}

/// An unordered 3D scan in millimetres, with optional provenance labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// Label of the synthetic identity or scan subject, if known.
    pub id: Option<String>,
    /// Position within a capture sequence, if the cloud is a frame.
    pub frame_index: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points, id: None, frame_index: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Arithmetic mean of the points. Errors on an empty cloud.
    pub fn centroid(&self) -> Result<[f64; 3], CloudError> {
        if self.points.is_empty() {
            return Err(CloudError::EmptyCloud);
        }
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len() as f64;
        Ok([c[0] / n, c[1] / n, c[2] / n])
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounding_box(&self) -> Result<([f64; 3], [f64; 3]), CloudError> {
        if self.points.is_empty() {
            return Err(CloudError::EmptyCloud);
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Ok((lo, hi))
    }
}

/// A square map whose valid pixels carry X, Y, Z point coordinates in mm.
///
/// `origin` is the x-y position of the lower corner of pixel (0, 0); pixel
/// (row, col) covers x in [origin.x + col*scale, +scale) and y likewise by
/// row. Invalid pixels hold the sentinel 0 in every channel and are only
/// distinguishable through the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMap {
    resolution: usize,
    scale: f64,
    origin: [f64; 2],
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    mask: Vec<bool>,
    /// Pixels backed directly by a projected point (not interpolation).
    occupied: Vec<bool>,
}

impl CoordinateMap {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.resolution + col
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[self.index(row, col)]
    }

    /// True when the pixel holds a projected point rather than a fill.
    pub fn is_occupied(&self, row: usize, col: usize) -> bool {
        self.occupied[self.index(row, col)]
    }

    /// (x, y, z) stored at a pixel; the sentinel triple 0 when masked.
    pub fn coords(&self, row: usize, col: usize) -> [f64; 3] {
        let i = self.index(row, col);
        [self.x[i], self.y[i], self.z[i]]
    }

    pub fn x_channel(&self) -> &[f64] {
        &self.x
    }

    pub fn y_channel(&self) -> &[f64] {
        &self.y
    }

    pub fn z_channel(&self) -> &[f64] {
        &self.z
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Drops the X and Y channels, keeping depth, mask, and geometry.
    pub fn to_depth_map(&self) -> DepthMap {
        DepthMap {
            resolution: self.resolution,
            scale: self.scale,
            origin: self.origin,
            z: self.z.clone(),
            mask: self.mask.clone(),
        }
    }

    /// Block-averages the map by an integer factor that must divide the
    /// resolution. A block is valid when at least one source pixel is valid;
    /// channel values average over the valid pixels only.
    pub fn downsample(&self, factor: usize) -> Result<CoordinateMap, CloudError> {
        if factor == 0 || self.resolution % factor != 0 {
            return Err(CloudError::BadFactor { factor, resolution: self.resolution });
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let res = self.resolution / factor;
        let n = res * res;
        let mut out = CoordinateMap {
            resolution: res,
            scale: self.scale * factor as f64,
            origin: self.origin,
            x: vec![0.0; n],
            y: vec![0.0; n],
            z: vec![0.0; n],
            mask: vec![false; n],
            occupied: vec![false; n],
        };
        for br in 0..res {
            for bc in 0..res {
                let mut sum = [0.0f64; 3];
                let mut count = 0usize;
                let mut any_occupied = false;
                for dr in 0..factor {
                    for dc in 0..factor {
                        let i = self.index(br * factor + dr, bc * factor + dc);
                        if self.mask[i] {
                            sum[0] += self.x[i];
                            sum[1] += self.y[i];
                            sum[2] += self.z[i];
                            count += 1;
                            any_occupied |= self.occupied[i];
                        }
                    }
                }
                if count > 0 {
                    let i = out.index(br, bc);
                    let inv = 1.0 / count as f64;
                    out.x[i] = sum[0] * inv;
                    out.y[i] = sum[1] * inv;
                    out.z[i] = sum[2] * inv;
                    out.mask[i] = true;
                    out.occupied[i] = any_occupied;
                }
            }
        }
        Ok(out)
    }
}

/// A single-channel depth map sharing [`CoordinateMap`] geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub(crate) resolution: usize,
    pub(crate) scale: f64,
    pub(crate) origin: [f64; 2],
    pub(crate) z: Vec<f64>,
    pub(crate) mask: Vec<bool>,
}

impl DepthMap {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.resolution + col
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[self.index(row, col)]
    }

    pub fn depth(&self, row: usize, col: usize) -> f64 {
        self.z[self.index(row, col)]
    }

    pub fn z_channel(&self) -> &[f64] {
        &self.z
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub(crate) fn z_channel_mut(&mut self) -> &mut [f64] {
        &mut self.z
    }

    pub(crate) fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }
}

/// Projects a cloud along z onto a `resolution` x `resolution` grid centred
/// at the cloud centroid with a pitch of `scale` mm per pixel.
///
/// Each pixel that receives projected points keeps the one whose x-y lands
/// closest to the pixel centre (ties: lowest point index). Unoccupied pixels
/// within [`GAP_LIMIT_PX`] of an occupied pixel are filled by inverse-
/// distance-weighted interpolation over the nearest [`INTERP_NEIGHBORS`]
/// occupied pixels; the rest stay masked with sentinel 0 channels.
pub fn rasterize(cloud: &PointCloud, resolution: usize, scale: f64) -> Result<CoordinateMap, CloudError> {
    if cloud.is_empty() {
        return Err(CloudError::EmptyCloud);
    }
    debug_assert!(resolution >= 16, "map resolution below a usable minimum");
    debug_assert!(scale > 0.0);
    let centroid = cloud.centroid()?;
    let half = resolution as f64 * scale * 0.5;
    let origin = [centroid[0] - half, centroid[1] - half];
    let n = resolution * resolution;

    let mut map = CoordinateMap {
        resolution,
        scale,
        origin,
        x: vec![0.0; n],
        y: vec![0.0; n],
        z: vec![0.0; n],
        mask: vec![false; n],
        occupied: vec![false; n],
    };

    // Best squared centre distance per occupied pixel, for nearest-point wins.
    let mut best = vec![f64::INFINITY; n];
    for p in &cloud.points {
        let fx = (p[0] - origin[0]) / scale;
        let fy = (p[1] - origin[1]) / scale;
        if fx < 0.0 || fy < 0.0 {
            continue;
        }
        let (col, row) = (fx as usize, fy as usize);
        if col >= resolution || row >= resolution {
            continue;
        }
        let cx = origin[0] + (col as f64 + 0.5) * scale;
        let cy = origin[1] + (row as f64 + 0.5) * scale;
        let d2 = (p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy);
        let i = row * resolution + col;
        // Strict < keeps the earliest point on ties.
        if d2 < best[i] {
            best[i] = d2;
            map.x[i] = p[0];
            map.y[i] = p[1];
            map.z[i] = p[2];
            map.mask[i] = true;
            map.occupied[i] = true;
        }
    }

    interpolate_gaps(&mut map);
    Ok(map)
}

/// Fills unoccupied pixels near occupied ones by inverse-distance weighting.
fn interpolate_gaps(map: &mut CoordinateMap) {
    let res = map.resolution;
    let gap = GAP_LIMIT_PX.ceil() as isize;
    let gap2 = GAP_LIMIT_PX * GAP_LIMIT_PX;

    // Chebyshev dilation of the occupancy grid prunes pixels that cannot
    // have any occupied neighbour within the gap limit.
    let mut row_hit = vec![false; res * res];
    for r in 0..res {
        for c in 0..res {
            let lo = c.saturating_sub(gap as usize);
            let hi = (c + gap as usize).min(res - 1);
            let mut hit = false;
            for cc in lo..=hi {
                if map.occupied[r * res + cc] {
                    hit = true;
                    break;
                }
            }
            row_hit[r * res + c] = hit;
        }
    }
    let mut near = vec![false; res * res];
    for r in 0..res {
        for c in 0..res {
            let lo = r.saturating_sub(gap as usize);
            let hi = (r + gap as usize).min(res - 1);
            let mut hit = false;
            for rr in lo..=hi {
                if row_hit[rr * res + c] {
                    hit = true;
                    break;
                }
            }
            near[r * res + c] = hit;
        }
    }

    // (squared distance, row, col) of the nearest occupied pixels, kept
    // sorted so ties resolve on pixel order deterministically.
    let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(INTERP_NEIGHBORS + 1);
    for r in 0..res {
        for c in 0..res {
            let i = r * res + c;
            if map.occupied[i] || !near[i] {
                continue;
            }
            cand.clear();
            for dr in -gap..=gap {
                let rr = r as isize + dr;
                if rr < 0 || rr >= res as isize {
                    continue;
                }
                for dc in -gap..=gap {
                    let cc = c as isize + dc;
                    if cc < 0 || cc >= res as isize {
                        continue;
                    }
                    let d2 = (dr * dr + dc * dc) as f64;
                    if d2 > gap2 {
                        continue;
                    }
                    let j = rr as usize * res + cc as usize;
                    if !map.occupied[j] {
                        continue;
                    }
                    let entry = (d2, rr as usize, cc as usize);
                    let pos = cand.partition_point(|e| *e < entry);
                    cand.insert(pos, entry);
                    if cand.len() > INTERP_NEIGHBORS {
                        cand.pop();
                    }
                }
            }
            if cand.is_empty() {
                continue;
            }
            let mut wsum = 0.0;
            let mut acc = [0.0f64; 3];
            for (d2, rr, cc) in &cand {
                let w = 1.0 / d2.sqrt();
                let j = rr * res + cc;
                acc[0] += w * map.x[j];
                acc[1] += w * map.y[j];
                acc[2] += w * map.z[j];
                wsum += w;
            }
            map.x[i] = acc[0] / wsum;
            map.y[i] = acc[1] / wsum;
            map.z[i] = acc[2] / wsum;
            map.mask[i] = true;
        }
    }
}
