//! Rigid transforms in SE(3), millimeters for translation.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

/// Frobenius-norm tolerance on `R^T R - I` for a rotation to count as valid.
pub const ORTHONORMALITY_TOL: f64 = 1e-9;

/// A rigid pose: orthonormal rotation (det +1) plus translation in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about `axis` (normalized internally) by `angle_rad`, no translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle_rad: f64) -> Self {
        let rotation = if angle_rad == 0.0 || axis.norm() == 0.0 {
            Matrix3::identity()
        } else {
            nalgebra::Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(axis),
                angle_rad,
            )
            .into_inner()
        };
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Map a point given in this frame into the parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Map a direction (no translation).
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `‖R^T R − I‖_F ≤ tol` and `det R ≈ +1`.
    pub fn rotation_is_orthonormal(&self) -> bool {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        gram.norm() <= ORTHONORMALITY_TOL && (self.rotation.determinant() - 1.0).abs() <= 1e-9
    }

    /// Angle of the relative rotation `R1^T R2`, in radians.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Combined pose distance in mm-equivalents: `‖t1−t2‖ + 100·angle(R1ᵀR2)`.
    ///
    /// One radian of orientation error is costed like 100 mm of translation,
    /// the same exchange rate used for prismatic joints elsewhere.
    pub fn distance_to(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm() + 100.0 * self.rotation_angle_to(other)
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}
