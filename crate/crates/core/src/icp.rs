//! Trimmed point-to-point ICP with a voxel-hashed nearest-neighbour index.
//!
//! Serves as the classical baseline the learned registrator is compared
//! against. Correspondences with the largest residuals are discarded each
//! iteration, the rigid update is solved in closed form from the trimmed
//! set, and convergence is declared when the trimmed RMS residual stops
//! improving by more than a tolerance.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::pose::{RigidTransform, UnitQuaternion};
use crate::vec3;

/// Errors surfaced by registration.
#[derive(Debug, Error, PartialEq)]
pub enum IcpError {
    /// A cloud had too few points to constrain a rigid motion.
    #[error("cloud has {got} points, need at least {need}")]
    TooFewPoints { got: usize, need: usize },
    /// The trimmed correspondence set collapsed onto a line or point.
    #[error("correspondences are rank-deficient, no unique rotation")]
    DegenerateGeometry,
}

/// Tuning knobs for [`icp_register`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    /// Hard iteration cap.
    pub max_iterations: usize,
    /// Stop once the trimmed RMS improves by less than this (mm).
    pub tolerance_mm: f64,
    /// Fraction of worst correspondences dropped each iteration.
    pub trim_fraction: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig { max_iterations: 100, tolerance_mm: 1e-4, trim_fraction: 0.1 }
    }
}

/// Outcome of one ICP run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    /// Motion mapping source coordinates into the target frame.
    pub transform: RigidTransform,
    /// Trimmed RMS residual (mm) after the final iteration.
    pub residual_mm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Trimmed RMS after each iteration, for diagnosing stalls.
    pub residual_history: Vec<f64>,
}

/// Uniform-grid spatial index over a fixed point set.
///
/// The cell size is derived from the data (twice the median nearest-
/// neighbour spacing of a stride sample), so a 3x3x3 neighbourhood around
/// the query's cell usually contains the true nearest neighbour. The scan
/// result is only trusted when the best candidate is closer than one cell
/// size; anything farther falls back to a brute-force pass, which keeps
/// queries exact rather than approximate.
pub struct VoxelIndex<'a> {
    points: &'a [[f64; 3]],
    cell_size: f64,
    cells: std::collections::HashMap<(i64, i64, i64), Vec<u32>>,
}

impl<'a> VoxelIndex<'a> {
    /// Builds the index; `points` must be non-empty.
    pub fn new(points: &'a [[f64; 3]]) -> Self {
        assert!(!points.is_empty(), "cannot index an empty point set");
        let cell_size = estimate_cell_size(points);
        let mut cells: std::collections::HashMap<(i64, i64, i64), Vec<u32>> =
            std::collections::HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell_size)).or_default().push(i as u32);
        }
        VoxelIndex { points, cell_size, cells }
    }

    fn key(p: &[f64; 3], cell: f64) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// Index and squared distance of the exact nearest neighbour of `q`.
    pub fn nearest(&self, q: &[f64; 3]) -> (usize, f64) {
        let (kx, ky, kz) = Self::key(q, self.cell_size);
        let mut best = usize::MAX;
        let mut best_d2 = f64::INFINITY;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in ids {
                            let d2 = vec3::dist2(q, &self.points[i as usize]);
                            if d2 < best_d2 {
                                best_d2 = d2;
                                best = i as usize;
                            }
                        }
                    }
                }
            }
        }
        // A hit farther than one cell size may be beaten by a point in an
        // unscanned cell; re-check exhaustively in that case.
        if best == usize::MAX || best_d2 > self.cell_size * self.cell_size {
            return brute_nearest(self.points, q);
        }
        (best, best_d2)
    }
}

fn brute_nearest(points: &[[f64; 3]], q: &[f64; 3]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d2 = vec3::dist2(q, p);
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    (best, best_d2)
}

/// Median nearest-neighbour spacing of a stride sample, doubled, as the
/// index cell size. Collapsed inputs fall back to 1 mm.
fn estimate_cell_size(points: &[[f64; 3]]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 1.0;
    }
    let sample = 1024.min(n);
    let stride = (n / sample).max(1);
    let mut spacings = Vec::with_capacity(sample);
    for i in (0..n).step_by(stride).take(sample) {
        let mut best = f64::INFINITY;
        for (j, p) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            best = best.min(vec3::dist2(&points[i], p));
        }
        if best.is_finite() {
            spacings.push(best.sqrt());
        }
    }
    spacings.sort_by(|a, b| a.partial_cmp(b).expect("finite spacings"));
    let median = spacings[spacings.len() / 2];
    if median > 1e-9 {
        2.0 * median
    } else {
        1.0
    }
}

/// Closed-form least-squares rigid motion taking `source[i]` onto
/// `target[i]`, solved by SVD of the cross-covariance with a reflection
/// guard on the last singular direction.
pub fn solve_rigid(source: &[[f64; 3]], target: &[[f64; 3]]) -> Result<RigidTransform, IcpError> {
    let n = source.len();
    if n < 3 || target.len() != n {
        return Err(IcpError::TooFewPoints { got: n.min(target.len()), need: 3 });
    }
    let inv = 1.0 / n as f64;
    let mut cs = [0.0f64; 3];
    let mut ct = [0.0f64; 3];
    for i in 0..n {
        for k in 0..3 {
            cs[k] += source[i][k] * inv;
            ct[k] += target[i][k] * inv;
        }
    }
    let mut h = Matrix3::<f64>::zeros();
    for i in 0..n {
        let s = vec3::sub(&source[i], &cs);
        let t = vec3::sub(&target[i], &ct);
        for r in 0..3 {
            for c in 0..3 {
                h[(r, c)] += s[r] * t[c];
            }
        }
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    if sv[0] < 1e-12 || sv[1] < 1e-9 * sv[0] {
        return Err(IcpError::DegenerateGeometry);
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let rot = v * correction * u.transpose();

    let mut m = [[0.0f64; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = rot[(r, c)];
        }
    }
    let q = UnitQuaternion::from_matrix(&m);
    let rc = q.rotate(cs);
    Ok(RigidTransform { t: vec3::sub(&ct, &rc), q })
}

/// Registers `source` onto `target` with trimmed point-to-point ICP.
///
/// Each iteration matches every transformed source point to its exact
/// nearest target point, drops the `trim_fraction` worst matches (ties
/// broken by point index), and re-solves the rigid motion on the kept set.
/// The reported residual is the RMS distance over kept correspondences,
/// which the closed-form step cannot increase.
pub fn icp_register(
    source: &PointCloud,
    target: &PointCloud,
    config: &IcpConfig,
) -> Result<IcpResult, IcpError> {
    let need = 10;
    if source.len() < need {
        return Err(IcpError::TooFewPoints { got: source.len(), need });
    }
    if target.len() < need {
        return Err(IcpError::TooFewPoints { got: target.len(), need });
    }
    let index = VoxelIndex::new(&target.points);
    let mut transform = RigidTransform::identity();
    let mut moved: Vec<[f64; 3]> = source.points.clone();
    let keep = source.len() - ((config.trim_fraction * source.len() as f64).floor() as usize);
    let keep = keep.max(need);
    let mut residual_history = Vec::new();
    let mut prev_rms = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0usize;

    for _ in 0..config.max_iterations {
        iterations += 1;
        // (squared residual, source index, target index) sorted ascending;
        // the index tiebreak keeps the trim deterministic under ties.
        let mut matches: Vec<(f64, u32, u32)> = moved
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (j, d2) = index.nearest(p);
                (d2, i as u32, j as u32)
            })
            .collect();
        matches.sort_by(|a, b| (a.0, a.1).partial_cmp(&(b.0, b.1)).expect("finite residuals"));
        matches.truncate(keep);

        let kept_src: Vec<[f64; 3]> = matches.iter().map(|m| source.points[m.1 as usize]).collect();
        let kept_tgt: Vec<[f64; 3]> = matches.iter().map(|m| target.points[m.2 as usize]).collect();
        transform = solve_rigid(&kept_src, &kept_tgt)?;

        for (i, p) in source.points.iter().enumerate() {
            moved[i] = transform.apply_point(*p);
        }
        let mut sum = 0.0;
        for m in &matches {
            sum += vec3::dist2(&moved[m.1 as usize], &target.points[m.2 as usize]);
        }
        let rms = (sum / matches.len() as f64).sqrt();
        residual_history.push(rms);

        if (prev_rms - rms).abs() < config.tolerance_mm {
            converged = true;
            prev_rms = rms;
            break;
        }
        prev_rms = rms;
    }

    Ok(IcpResult {
        transform,
        residual_mm: prev_rms,
        iterations,
        converged,
        residual_history,
    })
}

/// Rotation error (degrees) above which a registration counts as failed.
pub const FAILURE_THRESHOLD_DEG: f64 = 20.0;

/// Fraction of attempts whose rotation error exceeds
/// [`FAILURE_THRESHOLD_DEG`]. Empty input reports zero.
pub fn failure_rate(rotation_errors_deg: &[f64]) -> f64 {
    if rotation_errors_deg.is_empty() {
        return 0.0;
    }
    let failures = rotation_errors_deg
        .iter()
        .filter(|e| **e > FAILURE_THRESHOLD_DEG)
        .count();
    failures as f64 / rotation_errors_deg.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{rotation_error_deg, translation_error_mm, EulerAngles};
    use crate::synth::{sample_dense, SyntheticIdentity};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-9;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-100.0..100.0),
                    rng.gen_range(-100.0..100.0),
                    rng.gen_range(-50.0..50.0),
                ]
            })
            .collect()
    }

    #[test]
    fn voxel_index_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points = random_cloud(&mut rng, 2_000);
        let index = VoxelIndex::new(&points);
        for _ in 0..500 {
            let q = [
                rng.gen_range(-120.0..120.0),
                rng.gen_range(-120.0..120.0),
                rng.gen_range(-70.0..70.0),
            ];
            let (bi, bd2) = brute_nearest(&points, &q);
            let (vi, vd2) = index.nearest(&q);
            assert_eq!(vi, bi);
            assert!((vd2 - bd2).abs() < EPS);
        }
    }

    #[test]
    fn voxel_index_exact_on_clustered_data() {
        // Dense cluster plus far outliers stresses the fallback path: a
        // query near an outlier scans empty neighbour cells first.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut points = random_cloud(&mut rng, 1_000);
        points.push([5_000.0, 0.0, 0.0]);
        points.push([0.0, 5_000.0, 0.0]);
        let index = VoxelIndex::new(&points);
        let queries = [[4_900.0, 10.0, 0.0], [10.0, 4_950.0, 5.0], [2_500.0, 2_500.0, 0.0]];
        for q in &queries {
            let (bi, bd2) = brute_nearest(&points, q);
            let (vi, vd2) = index.nearest(q);
            assert_eq!(vi, bi);
            assert!((vd2 - bd2).abs() < EPS);
        }
    }

    #[test]
    fn solve_rigid_recovers_known_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let source = random_cloud(&mut rng, 40);
            let e = EulerAngles::new(
                rng.gen_range(-170.0..170.0),
                rng.gen_range(-80.0..80.0),
                rng.gen_range(-170.0..170.0),
            );
            let tf = RigidTransform {
                t: [
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                ],
                q: UnitQuaternion::from_euler(&e),
            };
            let target: Vec<[f64; 3]> = source.iter().map(|p| tf.apply_point(*p)).collect();
            let got = solve_rigid(&source, &target).unwrap();
            assert!(
                rotation_error_deg(&got.q, &tf.q) < 1e-8,
                "trial {trial}: rotation off"
            );
            assert!(translation_error_mm(&got.t, &tf.t) < 1e-7);
        }
    }

    #[test]
    fn solve_rigid_is_least_squares_under_noise() {
        // With even noise the exact generator transform should be close to
        // optimal; the solver's objective must not exceed the generator's.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let source = random_cloud(&mut rng, 200);
        let e = EulerAngles::new(20.0, -10.0, 15.0);
        let tf = RigidTransform { t: [5.0, -3.0, 2.0], q: UnitQuaternion::from_euler(&e) };
        let target: Vec<[f64; 3]> = source
            .iter()
            .map(|p| {
                let q = tf.apply_point(*p);
                [
                    q[0] + rng.gen_range(-0.5..0.5),
                    q[1] + rng.gen_range(-0.5..0.5),
                    q[2] + rng.gen_range(-0.5..0.5),
                ]
            })
            .collect();
        let got = solve_rigid(&source, &target).unwrap();
        let sse = |tf: &RigidTransform| -> f64 {
            source
                .iter()
                .zip(target.iter())
                .map(|(s, t)| crate::vec3::dist2(&tf.apply_point(*s), t))
                .sum()
        };
        assert!(sse(&got) <= sse(&tf) + EPS);
    }

    #[test]
    fn solve_rigid_rejects_degenerate_input() {
        // Collinear points leave a rotation about the line unconstrained.
        let source: Vec<[f64; 3]> = (0..20).map(|i| [i as f64, 0.0, 0.0]).collect();
        let target = source.clone();
        assert_eq!(solve_rigid(&source, &target), Err(IcpError::DegenerateGeometry));
    }

    #[test]
    fn solve_rigid_never_returns_reflection() {
        // A near-planar cloud with mirrored noise tempts the unguarded
        // solution toward det = -1; the guard must keep det = +1. Rotation
        // by the result plus centroid alignment must beat any reflection.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let source: Vec<[f64; 3]> = (0..60)
                .map(|_| {
                    [
                        rng.gen_range(-50.0..50.0),
                        rng.gen_range(-50.0..50.0),
                        rng.gen_range(-0.01..0.01),
                    ]
                })
                .collect();
            // Mirror z and perturb: the best orthogonal map is a reflection.
            let target: Vec<[f64; 3]> = source
                .iter()
                .map(|p| [p[0], p[1], -p[2] + rng.gen_range(-0.001..0.001)])
                .collect();
            let got = solve_rigid(&source, &target).unwrap();
            let m = matrix_of(&got.q);
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            assert!((det - 1.0).abs() < 1e-9, "determinant {det}");
        }
    }

    fn matrix_of(q: &UnitQuaternion) -> [[f64; 3]; 3] {
        let cols = [
            q.rotate([1.0, 0.0, 0.0]),
            q.rotate([0.0, 1.0, 0.0]),
            q.rotate([0.0, 0.0, 1.0]),
        ];
        let mut m = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = cols[c][r];
            }
        }
        m
    }

    #[test]
    fn icp_registers_small_motion_exactly() {
        let id = SyntheticIdentity::generate(50);
        let dense = sample_dense(&id, 4_000);
        let e = EulerAngles::new(4.0, -3.0, 2.0);
        let tf = RigidTransform { t: [2.0, 1.0, -1.5], q: UnitQuaternion::from_euler(&e) };
        let moved = crate::pose::apply_transform(&tf, &dense);
        // Register moved onto dense: expect the inverse motion.
        let result = icp_register(&moved, &dense, &IcpConfig::default()).unwrap();
        let want = tf.inverse();
        assert!(
            rotation_error_deg(&result.transform.q, &want.q) < 0.5,
            "rotation error {}",
            rotation_error_deg(&result.transform.q, &want.q)
        );
        assert!(translation_error_mm(&result.transform.t, &want.t) < 1.0);
        assert!(result.converged);
    }

    #[test]
    fn icp_residual_history_is_monotonic() {
        let id = SyntheticIdentity::generate(51);
        let dense = sample_dense(&id, 3_000);
        let e = EulerAngles::new(10.0, -6.0, 8.0);
        let tf = RigidTransform { t: [4.0, -2.0, 3.0], q: UnitQuaternion::from_euler(&e) };
        let moved = crate::pose::apply_transform(&tf, &dense);
        let result = icp_register(&moved, &dense, &IcpConfig::default()).unwrap();
        for w in result.residual_history.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-7,
                "residual increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn icp_identity_input_converges_immediately() {
        let id = SyntheticIdentity::generate(52);
        let dense = sample_dense(&id, 2_000);
        let result = icp_register(&dense, &dense, &IcpConfig::default()).unwrap();
        assert!(result.converged);
        assert!(result.iterations <= 3);
        assert!(result.residual_mm < 1e-9);
        assert!(
            rotation_error_deg(&result.transform.q, &UnitQuaternion::identity()) < 1e-9
        );
    }

    #[test]
    fn icp_rejects_tiny_clouds() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0]; 4]);
        let err = icp_register(&cloud, &cloud, &IcpConfig::default()).unwrap_err();
        assert_eq!(err, IcpError::TooFewPoints { got: 4, need: 10 });
    }

    #[test]
    fn icp_trims_outliers() {
        // Corrupt 8% of source points with large offsets; trimming at 10%
        // must still recover the motion to sub-degree accuracy.
        let id = SyntheticIdentity::generate(53);
        let dense = sample_dense(&id, 3_000);
        let e = EulerAngles::new(3.0, 2.0, -2.0);
        let tf = RigidTransform { t: [1.0, -1.0, 2.0], q: UnitQuaternion::from_euler(&e) };
        let mut moved = crate::pose::apply_transform(&tf, &dense);
        let n_bad = (0.08 * moved.len() as f64) as usize;
        for i in 0..n_bad {
            moved.points[i * 12][2] += 80.0;
        }
        let result = icp_register(&moved, &dense, &IcpConfig::default()).unwrap();
        let want = tf.inverse();
        assert!(rotation_error_deg(&result.transform.q, &want.q) < 1.0);
    }

    #[test]
    fn failure_rate_counts_threshold_crossings() {
        assert_eq!(failure_rate(&[]), 0.0);
        assert_eq!(failure_rate(&[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(failure_rate(&[25.0, 1.0, 30.0, 2.0]), 0.5);
        // Exactly at the threshold is not a failure.
        assert_eq!(failure_rate(&[FAILURE_THRESHOLD_DEG]), 0.0);
    }

    #[test]
    fn icp_result_serializes() {
        let id = SyntheticIdentity::generate(54);
        let dense = sample_dense(&id, 1_000);
        let result = icp_register(&dense, &dense, &IcpConfig::default()).unwrap();
        let json = serde_json::to_string(&result).unwrap();
        let back: IcpResult = serde_json::from_str(&json).unwrap();
        assert_eq!(result, back);
    }
}
