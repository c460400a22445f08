//! Pose regression losses and their analytic gradients.
//!
//! Four interchangeable variants score a predicted rigid motion against
//! ground truth. The L2 variants use Euclidean norms on both the
//! translation residual and the rotation residual; the L1 variants use
//! absolute-sum norms on both. Rotation residuals come in two
//! representations:
//!
//! * `QuatL2` / `QuatL1`: the residual between the normalised predicted
//!   quaternion and the hemisphere-aligned ground-truth quaternion.
//! * `AxisAngleL2` / `AxisAngleL1`: the residual between the raw predicted
//!   axis-angle 4-vector and the canonical ground-truth 4-vector. The
//!   prediction is deliberately not normalised here; the representation
//!   forces the optimiser to maintain the unit-axis constraint itself.
//!
//! The rotation weight alpha starts at 500 and jumps to 10,000 for any
//! example whose squared quaternion residual falls below 1e-4, re-weighting
//! rotation exactly when its contribution would otherwise vanish against
//! the translation term. The schedule keys on the squared quaternion
//! residual for every variant, including the axis-angle ones.
//!
//! Norms are not squared, so every variant has a kink at zero residual.
//! Gradients there are reported as zero with a `singular` flag instead of
//! NaN, which keeps optimisation running through perfect predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::{canonicalize, AxisAngle, RigidTransform, UnitQuaternion};

/// Errors surfaced by loss evaluation.
#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    /// The raw quaternion head collapsed; no direction to normalise.
    #[error("raw quaternion norm {norm:.3e} is below 1e-8")]
    ZeroQuaternion { norm: f64 },
}

/// Which rotation representation and norm pair the loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    QuatL2,
    QuatL1,
    AxisAngleL2,
    AxisAngleL1,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::QuatL2,
        LossVariant::QuatL1,
        LossVariant::AxisAngleL2,
        LossVariant::AxisAngleL1,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossVariant::QuatL2 => "quat_l2",
            LossVariant::QuatL1 => "quat_l1",
            LossVariant::AxisAngleL2 => "aa_l2",
            LossVariant::AxisAngleL1 => "aa_l1",
        }
    }

    pub fn uses_quaternion(&self) -> bool {
        matches!(self, LossVariant::QuatL2 | LossVariant::QuatL1)
    }

    fn uses_l1(&self) -> bool {
        matches!(self, LossVariant::QuatL1 | LossVariant::AxisAngleL1)
    }
}

impl std::str::FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quat_l2" => Ok(LossVariant::QuatL2),
            "quat_l1" => Ok(LossVariant::QuatL1),
            "aa_l2" => Ok(LossVariant::AxisAngleL2),
            "aa_l1" => Ok(LossVariant::AxisAngleL1),
            other => Err(format!(
                "unknown loss variant '{other}' (expected quat_l2|quat_l1|aa_l2|aa_l1)"
            )),
        }
    }
}

/// Rotation weighting with its threshold-triggered boost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Rotation weight while the residual is large.
    pub alpha: f64,
    /// Rotation weight once an example's rotation locks in.
    pub alpha_boosted: f64,
    /// Squared quaternion-residual threshold that triggers the boost.
    pub boost_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 500.0, alpha_boosted: 1e4, boost_threshold: 1e-4 }
    }
}

impl LossWeights {
    /// Fixed alpha with the boost disabled.
    pub fn constant(alpha: f64) -> Self {
        LossWeights { alpha, alpha_boosted: alpha, boost_threshold: 0.0 }
    }

    /// Weight for one example given its squared quaternion residual. The
    /// boost triggers strictly below the threshold.
    pub fn alpha_for(&self, rotation_residual_sq: f64) -> f64 {
        if rotation_residual_sq < self.boost_threshold {
            self.alpha_boosted
        } else {
            self.alpha
        }
    }
}

/// Raw network pose output before normalisation.
///
/// `rot` is a 4-vector: an unnormalised quaternion (w, x, y, z) for the
/// quaternion variants, a raw axis-angle 4-vector (angle, axis) otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePrediction {
    pub t: [f64; 3],
    pub rot: [f64; 4],
}

impl PosePrediction {
    /// Normalises the rotation head into a rigid transform.
    ///
    /// Quaternion variants scale `rot` onto the unit sphere; axis-angle
    /// variants read `rot` as (theta, axis) and fold it canonical. A
    /// degenerate rotation head falls back to the identity rotation, which
    /// keeps inference total even on garbage outputs.
    pub fn to_transform(&self, variant: LossVariant) -> RigidTransform {
        RigidTransform { t: self.t, q: self.rotation_quaternion(variant) }
    }

    fn rotation_quaternion(&self, variant: LossVariant) -> UnitQuaternion {
        if variant.uses_quaternion() {
            UnitQuaternion::new(self.rot[0], self.rot[1], self.rot[2], self.rot[3])
                .unwrap_or_else(UnitQuaternion::identity)
        } else {
            match AxisAngle::new(self.rot[0], [self.rot[1], self.rot[2], self.rot[3]]) {
                Some(aa) => UnitQuaternion::from_axis_angle(&aa),
                None => UnitQuaternion::identity(),
            }
        }
    }
}

/// A fully evaluated loss with gradients for the raw prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    /// Norm of the translation residual (L2 or L1 per variant), in mm.
    pub translation_term: f64,
    /// Rotation residual norm before weighting.
    pub rotation_term: f64,
    /// Weight applied to `rotation_term` in `total`.
    pub alpha_used: f64,
    /// True when any norm sat at its kink and a subgradient of zero was
    /// substituted for the affected coordinates.
    pub singular: bool,
    /// d total / d prediction.t
    pub grad_t: [f64; 3],
    /// d total / d prediction.rot (through normalisation for quaternions).
    pub grad_rot: [f64; 4],
}

/// Ground truth for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTarget {
    pub t: [f64; 3],
    pub q: UnitQuaternion,
}

impl PoseTarget {
    pub fn from_transform(tf: &RigidTransform) -> Self {
        PoseTarget { t: tf.t, q: tf.q }
    }

    /// Canonical axis-angle 4-vector of the rotation.
    pub fn axis_angle_vec(&self) -> [f64; 4] {
        self.q.to_axis_angle().as_vec4()
    }
}

/// Squared L2 distance between the prediction's rotation (as a unit
/// quaternion) and the hemisphere-aligned ground truth; the quantity the
/// alpha schedule tests, for every variant.
pub fn rotation_residual_sq(
    variant: LossVariant,
    pred: &PosePrediction,
    target: &PoseTarget,
) -> f64 {
    let qn = pred.rotation_quaternion(variant).components();
    let g = align_target(&qn, target);
    let mut sum = 0.0;
    for k in 0..4 {
        let d = g[k] - qn[k];
        sum += d * d;
    }
    sum
}

fn normalize4(v: &[f64; 4]) -> [f64; 4] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n, v[3] / n]
}

/// Flips the ground-truth quaternion onto the prediction's hemisphere.
///
/// q and -q encode the same rotation; comparing against the aligned copy
/// removes the spurious 2-unit jump the raw difference would see across
/// the double cover.
fn align_target(pred_unit: &[f64; 4], target: &PoseTarget) -> [f64; 4] {
    let g = target.q.components();
    let dot: f64 = (0..4).map(|k| pred_unit[k] * g[k]).sum();
    if dot < 0.0 {
        [-g[0], -g[1], -g[2], -g[3]]
    } else {
        g
    }
}

/// Evaluates one loss variant with analytic gradients.
///
/// `total = translation_term + alpha * rotation_term` exactly, with alpha
/// scheduled per example. L2 translation gradient is `-(d)/|d|`; L1 is
/// `-sign(d)` componentwise; both use a zero subgradient at kinks.
/// Quaternion rotation gradients flow through the normalisation via its
/// Jacobian `(I - q q^T)/|raw|`; axis-angle variants differentiate the raw
/// 4-vector directly against the canonical target vector.
pub fn evaluate(
    variant: LossVariant,
    pred: &PosePrediction,
    target: &PoseTarget,
    weights: &LossWeights,
) -> Result<LossValue, LossError> {
    if variant.uses_quaternion() {
        let norm = pred.rot.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-8 {
            return Err(LossError::ZeroQuaternion { norm });
        }
    }
    let mut singular = false;

    let d = [
        target.t[0] - pred.t[0],
        target.t[1] - pred.t[1],
        target.t[2] - pred.t[2],
    ];
    let mut grad_t = [0.0f64; 3];
    let translation_term = if variant.uses_l1() {
        let mut sum = 0.0;
        for k in 0..3 {
            sum += d[k].abs();
            if d[k] > 0.0 {
                grad_t[k] = -1.0;
            } else if d[k] < 0.0 {
                grad_t[k] = 1.0;
            } else {
                singular = true;
            }
        }
        sum
    } else {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if norm > 0.0 {
            for k in 0..3 {
                grad_t[k] = -d[k] / norm;
            }
        } else {
            singular = true;
        }
        norm
    };

    let alpha = weights.alpha_for(rotation_residual_sq(variant, pred, target));

    let (rotation_term, mut grad_rot, rot_singular) = match variant {
        LossVariant::QuatL2 => quat_grad_l2(&pred.rot, target),
        LossVariant::QuatL1 => quat_grad_l1(&pred.rot, target),
        LossVariant::AxisAngleL2 => aa_grad_l2(&pred.rot, target),
        LossVariant::AxisAngleL1 => aa_grad_l1(&pred.rot, target),
    };
    singular |= rot_singular;
    for v in &mut grad_rot {
        *v *= alpha;
    }

    Ok(LossValue {
        total: translation_term + alpha * rotation_term,
        translation_term,
        rotation_term,
        alpha_used: alpha,
        singular,
        grad_t,
        grad_rot,
    })
}

/// L2 rotation term on normalised quaternions.
///
/// With q = u/|u| and aligned target g, the term is r = |g - q|. The chain
/// through normalisation gives
///
/// ```text
/// d r / d u = -(I - q q^T)(g - q) / (|u| r) = -(g - q <q, g>) / (|u| r)
/// ```
///
/// using (I - q q^T) q = 0.
fn quat_grad_l2(raw: &[f64; 4], target: &PoseTarget) -> (f64, [f64; 4], bool) {
    let u_norm = (raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let q = normalize4(raw);
    let g = align_target(&q, target);
    let mut r2 = 0.0;
    for k in 0..4 {
        let d = g[k] - q[k];
        r2 += d * d;
    }
    let r = r2.sqrt();
    if r == 0.0 {
        return (0.0, [0.0; 4], true);
    }
    let qg: f64 = (0..4).map(|k| q[k] * g[k]).sum();
    let mut grad = [0.0f64; 4];
    for k in 0..4 {
        grad[k] = -(g[k] - q[k] * qg) / (u_norm * r);
    }
    (r, grad, false)
}

/// L1 rotation term on normalised quaternions.
///
/// The term is sum_k |g_k - q_k|; its gradient in q is -sign(g - q), pushed
/// through the normalisation Jacobian (I - q q^T)/|u|. Exact zeros in a
/// coordinate sit at a kink and contribute a zero subgradient.
fn quat_grad_l1(raw: &[f64; 4], target: &PoseTarget) -> (f64, [f64; 4], bool) {
    let u_norm = (raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let q = normalize4(raw);
    let g = align_target(&q, target);
    let mut r = 0.0;
    let mut s = [0.0f64; 4];
    let mut singular = false;
    for k in 0..4 {
        let d = g[k] - q[k];
        r += d.abs();
        if d > 0.0 {
            s[k] = 1.0;
        } else if d < 0.0 {
            s[k] = -1.0;
        } else {
            singular = true;
        }
    }
    let sq: f64 = (0..4).map(|k| s[k] * q[k]).sum();
    let mut grad = [0.0f64; 4];
    for k in 0..4 {
        grad[k] = -(s[k] - q[k] * sq) / u_norm;
    }
    (r, grad, singular)
}

/// L2 rotation term on raw axis-angle 4-vectors against the canonical
/// ground-truth vector. The raw axis is never normalised here.
fn aa_grad_l2(raw: &[f64; 4], target: &PoseTarget) -> (f64, [f64; 4], bool) {
    let g = target.axis_angle_vec();
    let mut r2 = 0.0;
    let mut resid = [0.0f64; 4];
    for k in 0..4 {
        resid[k] = g[k] - raw[k];
        r2 += resid[k] * resid[k];
    }
    let r = r2.sqrt();
    if r == 0.0 {
        return (0.0, [0.0; 4], true);
    }
    let mut grad = [0.0f64; 4];
    for k in 0..4 {
        grad[k] = -resid[k] / r;
    }
    (r, grad, false)
}

/// L1 rotation term on raw axis-angle 4-vectors.
fn aa_grad_l1(raw: &[f64; 4], target: &PoseTarget) -> (f64, [f64; 4], bool) {
    let g = target.axis_angle_vec();
    let mut r = 0.0;
    let mut grad = [0.0f64; 4];
    let mut singular = false;
    for k in 0..4 {
        let d = g[k] - raw[k];
        r += d.abs();
        if d > 0.0 {
            grad[k] = -1.0;
        } else if d < 0.0 {
            grad[k] = 1.0;
        } else {
            singular = true;
        }
    }
    (r, grad, singular)
}

/// Two formulations of a pure rotation error, evaluated side by side.
///
/// The residual formulation measures the squared distance of the error
/// quaternion `q_g compose q_p^-1` from identity; the difference
/// formulation measures the hemisphere-aligned squared distance between
/// the two quaternions directly. Both reduce to `2 - 2 cos(theta/2)` for a
/// relative angle theta, so they agree to floating-point accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationLossPair {
    pub residual_form: f64,
    pub difference_form: f64,
}

/// Evaluates both pure-rotation formulations for one (gt, pred) pair.
pub fn rotation_loss_pair(q_gt: &UnitQuaternion, q_pred: &UnitQuaternion) -> RotationLossPair {
    // Residual form: squared distance of q_g q_p^-1 from (1, 0, 0, 0), on
    // the hemisphere where its scalar part is non-negative.
    let e = q_gt.compose(&q_pred.inverse());
    let ec = canonicalize(e.components());
    let residual_form = (ec[0] - 1.0) * (ec[0] - 1.0)
        + ec[1] * ec[1]
        + ec[2] * ec[2]
        + ec[3] * ec[3];

    // Difference form: squared distance between the quaternions after
    // hemisphere alignment.
    let g = q_gt.components();
    let p = q_pred.components();
    let dot: f64 = (0..4).map(|k| g[k] * p[k]).sum();
    let g = if dot < 0.0 { [-g[0], -g[1], -g[2], -g[3]] } else { g };
    let mut difference_form = 0.0;
    for k in 0..4 {
        let d = g[k] - p[k];
        difference_form += d * d;
    }
    RotationLossPair { residual_form, difference_form }
}

/// Maximum absolute disagreement of the two formulations over sampled
/// rotation pairs; used to validate that they are interchangeable.
pub fn rotation_formulation_gap(pairs: &[(UnitQuaternion, UnitQuaternion)]) -> f64 {
    pairs
        .iter()
        .map(|(g, p)| {
            let v = rotation_loss_pair(g, p);
            (v.residual_form - v.difference_form).abs()
        })
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `evaluate(..).total` in all 7 prediction
/// coordinates. A verification oracle, not a training path.
pub fn fd_gradient(
    variant: LossVariant,
    pred: &PosePrediction,
    target: &PoseTarget,
    weights: &LossWeights,
    eps: f64,
) -> ([f64; 3], [f64; 4]) {
    let f = |p: &PosePrediction| {
        evaluate(variant, p, target, weights)
            .expect("probe stays away from the zero quaternion")
            .total
    };
    let mut gt = [0.0f64; 3];
    for k in 0..3 {
        let mut hi = *pred;
        let mut lo = *pred;
        hi.t[k] += eps;
        lo.t[k] -= eps;
        gt[k] = (f(&hi) - f(&lo)) / (2.0 * eps);
    }
    let mut gr = [0.0f64; 4];
    for k in 0..4 {
        let mut hi = *pred;
        let mut lo = *pred;
        hi.rot[k] += eps;
        lo.rot[k] -= eps;
        gr[k] = (f(&hi) - f(&lo)) / (2.0 * eps);
    }
    (gt, gr)
}

/// Relative error between analytic and finite-difference values, normalised
/// by max(1, |a|, |b|) so tiny gradients do not blow the ratio up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}
