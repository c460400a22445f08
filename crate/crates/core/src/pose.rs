//! Quaternion and rigid-transform algebra plus registration error metrics.
//!
//! Rotations are stored as canonical unit quaternions (non-negative real
//! part; on the w = 0 great circle the first nonzero imaginary component is
//! made non-negative), so the double cover q == -q never leaks into stored
//! values. Angles are radians internally; degrees appear only in types and
//! functions whose names say so.

use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cloud::PointCloud;

/// Below this squared-norm a quaternion component vector is treated as zero.
const ZERO_NORM_TOL: f64 = 1e-12;

/// Vector parts smaller than this are a null rotation for axis extraction.
const NULL_ROTATION_TOL: f64 = 1e-12;

/// A rotation stored as a canonical unit quaternion (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

/// A rotation as an angle in radians about a unit axis, with theta in [0, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle {
    /// Rotation angle in radians, always in [0, pi].
    pub theta: f64,
    /// Unit rotation axis.
    pub axis: [f64; 3],
}

/// Euler angles in degrees: roll about z, pitch about x, yaw about y,
/// composed extrinsically in that order (roll first).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
}

/// A rigid motion p' = R(p) + t with translation in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub t: [f64; 3],
    pub q: UnitQuaternion,
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Flips a quaternion 4-vector into canonical form: scalar part positive,
/// or at zero scalar part the first nonzero vector component positive.
/// Idempotent; the all-zero vector passes through unchanged.
pub fn canonicalize(c: [f64; 4]) -> [f64; 4] {
    let flip = if c[0] < 0.0 {
        true
    } else if c[0] == 0.0 {
        match c[1..].iter().find(|v| **v != 0.0) {
            Some(v) => *v < 0.0,
            None => false,
        }
    } else {
        false
    };
    if flip {
        [-c[0], -c[1], -c[2], -c[3]]
    } else {
        c
    }
}

impl UnitQuaternion {
    /// The null rotation.
    pub fn identity() -> Self {
        UnitQuaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Builds from raw components, normalizing and canonicalizing.
    /// Returns `None` for non-finite input or a (near-)zero component vector.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let n2 = w * w + x * x + y * y + z * z;
        if !n2.is_finite() || n2 < ZERO_NORM_TOL {
            return None;
        }
        let inv = 1.0 / n2.sqrt();
        let c = canonicalize([w * inv, x * inv, y * inv, z * inv]);
        Some(UnitQuaternion { w: c[0], x: c[1], y: c[2], z: c[3] })
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    /// Components in (w, x, y, z) order.
    pub fn components(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Four-dimensional inner product with another quaternion.
    pub fn dot(&self, other: &UnitQuaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Hamilton product self * other: other is applied first.
    pub fn compose(&self, other: &UnitQuaternion) -> Self {
        let p = quat_mul(self.components(), other.components());
        // Unit inputs keep the product within rounding of unit norm; this
        // only scrubs accumulated drift.
        UnitQuaternion::new(p[0], p[1], p[2], p[3]).expect("product of unit quaternions")
    }

    /// Rotational inverse (conjugate for unit quaternions).
    pub fn inverse(&self) -> Self {
        let c = canonicalize([self.w, -self.x, -self.y, -self.z]);
        UnitQuaternion { w: c[0], x: c[1], y: c[2], z: c[3] }
    }

    /// Rotates a point by the sandwich product q p q^-1 with p pure.
    pub fn rotate(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.components();
        let pure = [0.0, p[0], p[1], p[2]];
        let conj = [q[0], -q[1], -q[2], -q[3]];
        let r = quat_mul(quat_mul(q, pure), conj);
        [r[1], r[2], r[3]]
    }

    /// Builds the quaternion (cos(theta/2), sin(theta/2) * axis).
    pub fn from_axis_angle(aa: &AxisAngle) -> Self {
        let half = aa.theta * 0.5;
        let (s, c) = half.sin_cos();
        let q = canonicalize([c, s * aa.axis[0], s * aa.axis[1], s * aa.axis[2]]);
        UnitQuaternion { w: q[0], x: q[1], y: q[2], z: q[3] }
    }

    /// Extracts theta = 2 acos(clamp(w)) and the normalized vector part.
    /// A null rotation reports axis (0, 0, 1) by convention.
    pub fn to_axis_angle(&self) -> AxisAngle {
        let theta = 2.0 * self.w.clamp(-1.0, 1.0).acos();
        let s = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        if s < NULL_ROTATION_TOL {
            AxisAngle { theta, axis: [0.0, 0.0, 1.0] }
        } else {
            AxisAngle { theta, axis: [self.x / s, self.y / s, self.z / s] }
        }
    }

    /// Composes roll (z), pitch (x), yaw (y) extrinsically, roll first.
    pub fn from_euler(e: &EulerAngles) -> Self {
        let roll = UnitQuaternion::from_axis_angle(&AxisAngle {
            theta: e.roll_deg.to_radians(),
            axis: [0.0, 0.0, 1.0],
        });
        let pitch = UnitQuaternion::from_axis_angle(&AxisAngle {
            theta: e.pitch_deg.to_radians(),
            axis: [1.0, 0.0, 0.0],
        });
        let yaw = UnitQuaternion::from_axis_angle(&AxisAngle {
            theta: e.yaw_deg.to_radians(),
            axis: [0.0, 1.0, 0.0],
        });
        yaw.compose(&pitch).compose(&roll)
    }

    /// Decomposes into the convention of [`UnitQuaternion::from_euler`],
    /// with pitch in [-90, 90] degrees. At the |pitch| = 90 singularity the
    /// roll is reported as zero.
    pub fn to_euler(&self) -> EulerAngles {
        let m = self.to_matrix();
        let sp = (-m[1][2]).clamp(-1.0, 1.0);
        let pitch = sp.asin();
        if sp.abs() < 1.0 - 1e-12 {
            EulerAngles {
                roll_deg: m[1][0].atan2(m[1][1]).to_degrees(),
                pitch_deg: pitch.to_degrees(),
                yaw_deg: m[0][2].atan2(m[2][2]).to_degrees(),
            }
        } else {
            let yaw = if sp > 0.0 {
                m[0][1].atan2(m[0][0])
            } else {
                (-m[0][1]).atan2(m[0][0])
            };
            EulerAngles { roll_deg: 0.0, pitch_deg: pitch.to_degrees(), yaw_deg: yaw.to_degrees() }
        }
    }

    /// Row-major rotation matrix acting on column vectors.
    pub(crate) fn to_matrix(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Recovers the quaternion from a proper rotation matrix via the
    /// largest-diagonal branch, then canonicalizes.
    pub(crate) fn from_matrix(m: &[[f64; 3]; 3]) -> Self {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let (w, x, y, z);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[2][1] - m[1][2]) / s;
            y = (m[0][2] - m[2][0]) / s;
            z = (m[1][0] - m[0][1]) / s;
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            w = (m[2][1] - m[1][2]) / s;
            x = 0.25 * s;
            y = (m[0][1] + m[1][0]) / s;
            z = (m[0][2] + m[2][0]) / s;
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            w = (m[0][2] - m[2][0]) / s;
            x = (m[0][1] + m[1][0]) / s;
            y = 0.25 * s;
            z = (m[1][2] + m[2][1]) / s;
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            w = (m[1][0] - m[0][1]) / s;
            x = (m[0][2] + m[2][0]) / s;
            y = (m[1][2] + m[2][1]) / s;
            z = 0.25 * s;
        }
        UnitQuaternion::new(w, x, y, z).expect("rotation matrix yields a unit quaternion")
    }
}

impl Serialize for UnitQuaternion {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.components().serialize(s)
    }
}

impl<'de> Deserialize<'de> for UnitQuaternion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let c = <[f64; 4]>::deserialize(d)?;
        let n2 = c.iter().map(|v| v * v).sum::<f64>();
        // Values written by `serialize` are unit to the last ulp; skipping
        // the renormalising constructor keeps the write/read round trip
        // bit-exact. Anything farther from unit norm is normalised as usual.
        if n2.is_finite() && (n2 - 1.0).abs() <= 4.0 * f64::EPSILON {
            let c = canonicalize(c);
            return Ok(UnitQuaternion { w: c[0], x: c[1], y: c[2], z: c[3] });
        }
        UnitQuaternion::new(c[0], c[1], c[2], c[3])
            .ok_or_else(|| D::Error::custom("quaternion with zero or non-finite norm"))
    }
}

impl AxisAngle {
    /// Builds a canonical axis-angle: the axis is normalized and theta is
    /// folded into [0, pi] (flipping the axis when needed). Returns `None`
    /// for a non-finite angle or a zero axis.
    pub fn new(theta: f64, axis: [f64; 3]) -> Option<Self> {
        if !theta.is_finite() {
            return None;
        }
        let n = crate::vec3::norm(&axis);
        if !n.is_finite() || n < 1e-12 {
            return None;
        }
        let mut axis = crate::vec3::scale(&axis, 1.0 / n);
        let mut theta = theta.rem_euclid(2.0 * std::f64::consts::PI);
        if theta > std::f64::consts::PI {
            theta = 2.0 * std::f64::consts::PI - theta;
            axis = crate::vec3::scale(&axis, -1.0);
        }
        Some(AxisAngle { theta, axis })
    }

    /// The canonical 4-vector (theta, axis) used by axis-angle losses.
    pub fn as_vec4(&self) -> [f64; 4] {
        [self.theta, self.axis[0], self.axis[1], self.axis[2]]
    }
}

impl EulerAngles {
    pub fn new(roll_deg: f64, pitch_deg: f64, yaw_deg: f64) -> Self {
        EulerAngles { roll_deg, pitch_deg, yaw_deg }
    }

    pub fn zero() -> Self {
        EulerAngles { roll_deg: 0.0, pitch_deg: 0.0, yaw_deg: 0.0 }
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { t: [0.0; 3], q: UnitQuaternion::identity() }
    }

    /// Applies the motion to a single point.
    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        crate::vec3::add(&self.q.rotate(p), &self.t)
    }

    /// self o first: `first` acts on points before `self`.
    pub fn compose(&self, first: &RigidTransform) -> Self {
        RigidTransform {
            t: crate::vec3::add(&self.q.rotate(first.t), &self.t),
            q: self.q.compose(&first.q),
        }
    }

    /// The motion undoing this one.
    pub fn inverse(&self) -> Self {
        let qi = self.q.inverse();
        RigidTransform { t: crate::vec3::scale(&qi.rotate(self.t), -1.0), q: qi }
    }
}

/// Applies a rigid transform to every point, keeping cloud labels.
pub fn apply_transform(tf: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| tf.apply_point(*p)).collect(),
        id: cloud.id.clone(),
        frame_index: cloud.frame_index,
    }
}

/// Residual rotation angle between two orientations, in degrees:
/// 2 acos(clamp(|w(q_g o q_p^-1)|, 0, 1)). Symmetric and double-cover safe.
pub fn rotation_error_deg(q_g: &UnitQuaternion, q_p: &UnitQuaternion) -> f64 {
    let e = q_g.compose(&q_p.inverse());
    (2.0 * e.w().abs().clamp(0.0, 1.0).acos()).to_degrees()
}

/// Euclidean distance between two translations, in millimetres.
pub fn translation_error_mm(t_g: &[f64; 3], t_p: &[f64; 3]) -> f64 {
    let dx = t_g[0] - t_p[0];
    let dy = t_g[1] - t_p[1];
    let dz = t_g[2] - t_p[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}
