//! Rigid-body poses and the translation distance used by the recall criterion.
//!
//! Poses are kept in whatever world frame the pose file uses. For the KITTI
//! odometry layout that is the left camera frame of the first scan; no
//! camera/LiDAR extrinsic is applied because query and database poses always
//! come from the same file.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Tolerance used when accepting a parsed rotation.
pub const ORTHONORMAL_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Parse a row-major 3×4 `[R|t]` row as stored in KITTI pose files.
    pub fn from_kitti_row(values: &[f64]) -> Result<Self> {
        if values.len() != 12 {
            return Err(Error::Format(format!(
                "pose row needs 12 values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "pose row value {i} is not finite"
            )));
        }
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8],
            values[9], values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        let pose = Self {
            rotation,
            translation,
        };
        let err = pose.orthonormality_error();
        if err > ORTHONORMAL_TOL {
            return Err(Error::Validation(format!(
                "rotation is not orthonormal (max |RᵀR − I| = {err:.3e}, det = {:.6})",
                rotation.determinant()
            )));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Validation(format!(
                "rotation has determinant {:.6}, expected 1",
                rotation.determinant()
            )));
        }
        Ok(pose)
    }

    /// Inverse of [`Pose::from_kitti_row`].
    pub fn to_kitti_row(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    /// Largest absolute entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Euclidean distance between the translation parts of two poses, in meters.
pub fn translation_distance(a: &Pose, b: &Pose) -> f64 {
    let d = a.translation - b.translation;
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}
