//! Deformation-state parameterization.
//!
//! The relative roto-translation between the robot grasp frame and the human
//! grasp proxy frame is described by three translations and two rotations
//! (about y, then z). Rotation about x is never represented. Translations are
//! expressed in the robot gripper frame.

use std::f64::consts::PI;
use std::ops::{Index, Neg};

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest x-Euler residual (radians) tolerated by [`from_transform`].
pub const MAX_X_ROTATION: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation has an x-Euler component of {0:.3e} rad, which a deformation state cannot represent")]
    NonRecoverableRotation(f64),
    #[error("grid axis `{axis}`: {reason}")]
    InvalidGrid { axis: &'static str, reason: String },
}

/// The five parameters of the relative pose between robot grasp and human grasp proxy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeformationState {
    /// Meters.
    pub x: f64,
    /// Meters.
    pub y: f64,
    /// Meters.
    pub z: f64,
    /// Rotation about y, radians.
    pub theta: f64,
    /// Rotation about z, radians.
    pub gamma: f64,
}

impl DeformationState {
    pub const fn new(x: f64, y: f64, z: f64, theta: f64, gamma: f64) -> Self {
        Self { x, y, z, theta, gamma }
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.x, self.y, self.z, self.theta, self.gamma]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Adds a delta component-wise.
    pub fn offset(self, d: DeltaState) -> Self {
        let a = self.to_array();
        Self::from_array(std::array::from_fn(|i| a[i] + d.0[i]))
    }
}

/// A proper rigid transform `p' = rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Checks orthonormality and a positive determinant within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).abs().max() <= tol
            && (r.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Re-orthonormalizes the rotation after repeated composition.
    pub fn renormalized(&self) -> RigidTransform {
        let rot = Rotation3::from_matrix_eps(&self.rotation, 1e-12, 16, Rotation3::identity());
        RigidTransform { rotation: *rot.matrix(), translation: self.translation }
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `R = Ry(theta) * Rz(gamma)`, translation `(x, y, z)`.
pub fn to_transform(s: &DeformationState) -> RigidTransform {
    RigidTransform {
        rotation: rot_y(s.theta) * rot_z(s.gamma),
        translation: Vector3::new(s.x, s.y, s.z),
    }
}

/// Decomposes `R = Rx(alpha) * Ry(theta) * Rz(gamma)` and returns the state
/// together with the discarded `alpha`.
pub fn from_transform_projected(t: &RigidTransform) -> (DeformationState, f64) {
    let r = &t.rotation;
    let theta = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let gamma = (-r[(0, 1)]).atan2(r[(0, 0)]);
    let alpha = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let s = DeformationState::new(t.translation.x, t.translation.y, t.translation.z, theta, gamma);
    (s, alpha)
}

/// Inverse of [`to_transform`]; fails when the rotation carries an x-Euler
/// component larger than [`MAX_X_ROTATION`].
pub fn from_transform(t: &RigidTransform) -> Result<DeformationState, GeometryError> {
    let (s, alpha) = from_transform_projected(t);
    if alpha.abs() > MAX_X_ROTATION {
        return Err(GeometryError::NonRecoverableRotation(alpha));
    }
    Ok(s)
}

/// Component-wise `current - desired`, ordered (x, y, z, theta, gamma).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaState(pub [f64; 5]);

impl DeltaState {
    pub fn max_translation(&self) -> f64 {
        self.0[..3].iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_rotation(&self) -> f64 {
        self.0[3..].iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn translation_norm(&self) -> f64 {
        self.0[..3].iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Index<usize> for DeltaState {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Neg for DeltaState {
    type Output = DeltaState;
    fn neg(self) -> DeltaState {
        DeltaState(self.0.map(|v| -v))
    }
}

pub fn delta(current: &DeformationState, desired: &DeformationState) -> DeltaState {
    let (c, d) = (current.to_array(), desired.to_array());
    DeltaState(std::array::from_fn(|i| c[i] - d[i]))
}

/// Target deformation state the follower regulates toward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestConfiguration {
    pub desired: DeformationState,
}

impl Default for RestConfiguration {
    /// Human grasp proxy 0.6 m in front of the gripper, unrotated.
    fn default() -> Self {
        Self { desired: DeformationState::new(0.0, 0.6, 0.0, 0.0, 0.0) }
    }
}

/// One lattice axis: `center ± half_range` sampled every `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisGrid {
    pub center: f64,
    pub half_range: f64,
    pub step: f64,
}

impl AxisGrid {
    pub const fn new(center: f64, half_range: f64, step: f64) -> Self {
        Self { center, half_range, step }
    }

    fn validate(&self, axis: &'static str) -> Result<(), GeometryError> {
        let bad = |reason: &str| GeometryError::InvalidGrid { axis, reason: reason.to_string() };
        if !(self.center.is_finite() && self.half_range.is_finite() && self.step.is_finite()) {
            return Err(bad("non-finite value"));
        }
        if self.half_range < 0.0 {
            return Err(bad("half-range must be non-negative"));
        }
        if self.step <= 0.0 {
            return Err(bad("step must be positive"));
        }
        if self.half_range > 0.0 && self.step > 2.0 * self.half_range * (1.0 + 1e-9) {
            return Err(bad("step exceeds the full range"));
        }
        Ok(())
    }

    /// Number of lattice values: every `step` across the full range, endpoints included
    /// when the range is a whole number of steps.
    pub fn count(&self) -> usize {
        if self.half_range == 0.0 {
            return 1;
        }
        ((2.0 * self.half_range / self.step) + 1e-9).floor() as usize + 1
    }

    /// Lattice symmetric about the center.
    pub fn values(&self) -> Vec<f64> {
        let n = self.count();
        let mid = (n as f64 - 1.0) / 2.0;
        (0..n).map(|i| self.center + (i as f64 - mid) * self.step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseGridSpec {
    pub x: AxisGrid,
    pub y: AxisGrid,
    pub z: AxisGrid,
    pub theta: AxisGrid,
    pub gamma: AxisGrid,
}

impl PoseGridSpec {
    /// ±0.105 m every 0.03 m on x, y, z and ±20° every 5° on theta, gamma.
    pub fn full(rest: &RestConfiguration) -> Self {
        Self::around(rest, 0.105, 0.03, 20.0, 5.0)
    }

    /// Five values per axis over the same ranges.
    pub fn desk(rest: &RestConfiguration) -> Self {
        Self::around(rest, 0.105, 0.0525, 20.0, 10.0)
    }

    pub fn around(
        rest: &RestConfiguration,
        half_m: f64,
        step_m: f64,
        half_deg: f64,
        step_deg: f64,
    ) -> Self {
        let d = &rest.desired;
        let (hr, sr) = (half_deg.to_radians(), step_deg.to_radians());
        Self {
            x: AxisGrid::new(d.x, half_m, step_m),
            y: AxisGrid::new(d.y, half_m, step_m),
            z: AxisGrid::new(d.z, half_m, step_m),
            theta: AxisGrid::new(d.theta, hr, sr),
            gamma: AxisGrid::new(d.gamma, hr, sr),
        }
    }

    pub fn axes(&self) -> [(&'static str, &AxisGrid); 5] {
        [
            ("x", &self.x),
            ("y", &self.y),
            ("z", &self.z),
            ("theta", &self.theta),
            ("gamma", &self.gamma),
        ]
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.axes().iter().try_for_each(|(name, a)| a.validate(name))
    }

    pub fn pose_count(&self) -> usize {
        self.axes().iter().map(|(_, a)| a.count()).product()
    }

    pub fn half_ranges(&self) -> [f64; 5] {
        self.axes().map(|(_, a)| a.half_range)
    }

    pub fn centers(&self) -> [f64; 5] {
        self.axes().map(|(_, a)| a.center)
    }
}

/// Cartesian product of the axis lattices, lexicographic in (x, y, z, theta, gamma)
/// with gamma varying fastest.
pub fn enumerate_grid(spec: &PoseGridSpec) -> Result<Vec<DeformationState>, GeometryError> {
    spec.validate()?;
    let vals = spec.axes().map(|(_, a)| a.values());
    let mut out = Vec::with_capacity(spec.pose_count());
    for &x in &vals[0] {
        for &y in &vals[1] {
            for &z in &vals[2] {
                for &t in &vals[3] {
                    for &g in &vals[4] {
                        out.push(DeformationState::new(x, y, z, t, g));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}
