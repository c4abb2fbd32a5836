//! Rigid-body math: unit quaternions, SE(3) poses, dual quaternions and
//! weighted dual-quaternion blending.
//!
//! Conventions: quaternions are Hamilton, stored `(w, x, y, z)`. A pose maps
//! a point `x` to `R x + t`. `a.compose(&b)` applies `b` first, then `a`.

use std::ops::{Add, Mul, Neg};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Tolerance on the weight sum accepted by [`dqb`].
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Se3Error {
    #[error("blending requires at least one transform")]
    Empty,
    #[error("{weights} weights supplied for {transforms} transforms")]
    LengthMismatch { weights: usize, transforms: usize },
    #[error("blend weights sum to {sum}, expected 1")]
    WeightSum { sum: f64 },
    #[error("blend weight {index} is negative ({value})")]
    NegativeWeight { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };
    pub const ZERO: Quaternion = Quaternion { w: 0.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Pure quaternion `(0, v)`.
    pub fn pure(v: &Vec3) -> Self {
        Self::new(0.0, v.x, v.y, v.z)
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Self::new(c, s * a.x, s * a.y, s * a.z)
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    /// Unit quaternion in the same direction; the zero quaternion maps to identity.
    pub fn normalize(&self) -> Self {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            Self::IDENTITY
        } else {
            self.scale(1.0 / n)
        }
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Rotates `v` by this (assumed unit) quaternion.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let u = self.vector();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let Quaternion { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Unit quaternion from a proper rotation matrix (Shepperd's method).
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Self::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalize()
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl Add for Quaternion {
    type Output = Quaternion;

    fn add(self, b: Quaternion) -> Quaternion {
        Quaternion::new(self.w + b.w, self.x + b.x, self.y + b.y, self.z + b.z)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;

    fn neg(self) -> Quaternion {
        self.scale(-1.0)
    }
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SE3Pose {
    pub rotation: Quaternion,
    pub translation: Vec3,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn new(rotation: Quaternion, translation: Vec3) -> Self {
        Self { rotation: rotation.normalize(), translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Quaternion::IDENTITY, translation: Vec3::zeros() }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self { rotation: Quaternion::IDENTITY, translation: Vec3::new(x, y, z) }
    }

    pub fn from_rotation(rotation: Quaternion) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    /// `self ∘ other`: applies `other`, then `self`.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: (self.rotation * other.rotation).normalize(),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let inv = self.rotation.conjugate();
        SE3Pose { rotation: inv, translation: -inv.rotate(&self.translation) }
    }

    pub fn apply_point(&self, x: &Vec3) -> Vec3 {
        self.rotation.rotate(x) + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.rotate(v)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix()
    }

    pub fn to_dual_quaternion(&self) -> DualQuaternion {
        DualQuaternion::from_pose(self)
    }

    /// Largest absolute difference over quaternion (sign-aware) and translation
    /// components. Used by tests and determinism checks.
    pub fn max_abs_diff(&self, other: &SE3Pose) -> f64 {
        let sign = if self.rotation.dot(&other.rotation) < 0.0 { -1.0 } else { 1.0 };
        let q = other.rotation.scale(sign);
        let dq = [
            self.rotation.w - q.w,
            self.rotation.x - q.x,
            self.rotation.y - q.y,
            self.rotation.z - q.z,
        ];
        let dt = self.translation - other.translation;
        dq.iter().chain(dt.iter()).fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Unit dual quaternion `real + ε dual` with `dual = ½ (0, t) real`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualQuaternion {
    pub real: Quaternion,
    pub dual: Quaternion,
}

impl DualQuaternion {
    pub fn from_pose(pose: &SE3Pose) -> Self {
        let real = pose.rotation.normalize();
        let dual = (Quaternion::pure(&pose.translation) * real).scale(0.5);
        Self { real, dual }
    }

    /// Divides by the real-part norm, then removes the component of the dual
    /// part along the real part so that `real · dual = 0`.
    pub fn normalize(&self) -> Self {
        let n = self.real.norm();
        if n == 0.0 || !n.is_finite() {
            return Self { real: Quaternion::IDENTITY, dual: Quaternion::ZERO };
        }
        let real = self.real.scale(1.0 / n);
        let dual = self.dual.scale(1.0 / n);
        let dual = dual + real.scale(-real.dot(&dual));
        Self { real, dual }
    }

    pub fn to_pose(&self) -> SE3Pose {
        let dq = self.normalize();
        let t = (dq.dual * dq.real.conjugate()).scale(2.0);
        SE3Pose { rotation: dq.real, translation: t.vector() }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { real: self.real.scale(s), dual: self.dual.scale(s) }
    }
}

impl Add for DualQuaternion {
    type Output = DualQuaternion;

    fn add(self, b: DualQuaternion) -> DualQuaternion {
        DualQuaternion { real: self.real + b.real, dual: self.dual + b.dual }
    }
}

impl Neg for DualQuaternion {
    type Output = DualQuaternion;

    fn neg(self) -> DualQuaternion {
        self.scale(-1.0)
    }
}

/// Dual-quaternion blend of rigid transforms.
///
/// Every input is sign-aligned to the first one (flipped when its real part
/// has a negative dot product with the first real part) before the weighted
/// sum is normalized back to a rigid transform.
pub fn dqb(weights: &[f64], transforms: &[SE3Pose]) -> Result<SE3Pose, Se3Error> {
    if transforms.is_empty() || weights.is_empty() {
        return Err(Se3Error::Empty);
    }
    if weights.len() != transforms.len() {
        return Err(Se3Error::LengthMismatch { weights: weights.len(), transforms: transforms.len() });
    }
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0)) {
        return Err(Se3Error::NegativeWeight { index, value });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Se3Error::WeightSum { sum });
    }
    Ok(blend_dual_quaternions(weights, transforms.iter().map(DualQuaternion::from_pose)))
}

pub(crate) fn blend_dual_quaternions(
    weights: &[f64],
    dqs: impl IntoIterator<Item = DualQuaternion>,
) -> SE3Pose {
    let mut iter = dqs.into_iter();
    let pivot = match iter.next() {
        Some(p) => p,
        None => return SE3Pose::identity(),
    };
    let mut acc = pivot.scale(weights[0]);
    for (dq, &w) in iter.zip(&weights[1..]) {
        let aligned = if dq.real.dot(&pivot.real) < 0.0 { -dq } else { dq };
        acc = acc + aligned.scale(w);
    }
    acc.to_pose()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot(axis: [f64; 3], angle: f64) -> Quaternion {
        Quaternion::from_axis_angle(&Vec3::new(axis[0], axis[1], axis[2]), angle)
    }

    fn sample_pose() -> SE3Pose {
        SE3Pose::new(rot([0.3, -1.0, 0.5], 1.1), Vec3::new(0.4, -2.0, 1.5))
    }

    #[test]
    fn compose_with_identity() {
        let p = sample_pose();
        assert!(SE3Pose::identity().compose(&p).max_abs_diff(&p) < 1e-12);
        assert!(p.compose(&SE3Pose::identity()).max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = sample_pose();
        assert!(p.compose(&p.inverse()).max_abs_diff(&SE3Pose::identity()) < 1e-9);
        assert!(p.inverse().compose(&p).max_abs_diff(&SE3Pose::identity()) < 1e-9);
    }

    #[test]
    fn compose_pure_translations() {
        let c = SE3Pose::from_translation(1.0, 0.0, 0.0).compose(&SE3Pose::from_translation(0.0, 2.0, 0.0));
        assert!(c.max_abs_diff(&SE3Pose::from_translation(1.0, 2.0, 0.0)) < 1e-15);
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let a = SE3Pose::new(rot([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2), Vec3::zeros());
        let b = SE3Pose::from_translation(1.0, 0.0, 0.0);
        let x = Vec3::zeros();
        // translate to (1,0,0), then rotate 90° about z -> (0,1,0)
        let y = a.compose(&b).apply_point(&x);
        assert!((y - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rotation_matrix_round_trip() {
        let q = rot([1.0, 2.0, -0.5], 2.7);
        let back = Quaternion::from_rotation_matrix(&q.to_rotation_matrix());
        assert!((back.dot(&q).abs() - 1.0).abs() < 1e-12);
        let v = Vec3::new(0.2, -0.7, 1.3);
        assert!((q.rotate(&v) - q.to_rotation_matrix() * v).norm() < 1e-12);
    }

    #[test]
    fn dual_quaternion_round_trip_and_plucker() {
        let p = sample_pose();
        let dq = p.to_dual_quaternion();
        assert!(dq.real.dot(&dq.dual).abs() < 1e-12);
        assert!(dq.to_pose().max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn dqb_single_element() {
        let p = sample_pose();
        assert!(dqb(&[1.0], &[p]).unwrap().max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn dqb_identical_inputs() {
        let p = sample_pose();
        assert!(dqb(&[0.3, 0.7], &[p, p]).unwrap().max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn dqb_pure_translation_is_linear() {
        let out = dqb(
            &[0.5, 0.5],
            &[SE3Pose::from_translation(0.0, 0.0, 0.0), SE3Pose::from_translation(2.0, 0.0, 0.0)],
        )
        .unwrap();
        assert!(out.max_abs_diff(&SE3Pose::from_translation(1.0, 0.0, 0.0)) < 1e-12);
    }

    #[test]
    fn dqb_handles_double_cover() {
        let p = sample_pose();
        let flipped = SE3Pose { rotation: -p.rotation, translation: p.translation };
        let out = dqb(&[0.5, 0.5], &[p, flipped]).unwrap();
        assert!(out.max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn dqb_rejects_bad_input() {
        let p = sample_pose();
        assert_eq!(dqb(&[], &[]), Err(Se3Error::Empty));
        assert!(matches!(dqb(&[0.5], &[p, p]), Err(Se3Error::LengthMismatch { .. })));
        assert!(matches!(dqb(&[0.5, 0.6], &[p, p]), Err(Se3Error::WeightSum { .. })));
        assert!(matches!(dqb(&[1.5, -0.5], &[p, p]), Err(Se3Error::NegativeWeight { index: 1, .. })));
    }
}
