//! Pinhole projection, rig poses and the image-plane augmentation algebra.
//!
//! Conventions:
//!
//! * Pixel coordinates refer to pixel centers. A horizontal flip of an image
//!   `W` pixels wide maps `x -> (W - 1) - x`.
//! * Camera frame: `x` right, `y` down, `z` forward (meters).
//! * Ego frame: `x` forward, `y` left, `z` up (meters).
//! * An [`AugTransform2D`] maps source pixels to augmented pixels. Unprojecting
//!   an augmented pixel applies its inverse before the intrinsics inverse, so
//!   the augmentation never leaks into the recovered 3D geometry.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn homogeneous(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CameraPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// Pinhole intrinsics in pixel units, stored unnormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    matrix: Matrix3<f64>,
    inverse: Matrix3<f64>,
}

impl CameraIntrinsics {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidIntrinsics("non-finite entry".into()));
        }
        if matrix[(2, 0)] != 0.0 || matrix[(2, 1)] != 0.0 || matrix[(2, 2)] != 1.0 {
            return Err(Error::InvalidIntrinsics(
                "bottom row must be exactly (0, 0, 1)".into(),
            ));
        }
        if matrix[(0, 0)] <= 0.0 || matrix[(1, 1)] <= 0.0 {
            return Err(Error::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        let inverse = matrix
            .try_inverse()
            .ok_or(Error::Singular("camera intrinsics"))?;
        Ok(Self { matrix, inverse })
    }

    /// Zero-skew intrinsics from focal lengths and principal point.
    pub fn from_focal(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::new(Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0))
    }

    /// Intrinsics for an image of `width x height` pixels with horizontal
    /// field of view `hfov` (radians), square pixels and a centered principal
    /// point.
    pub fn from_fov(hfov: f64, width: usize, height: usize) -> Result<Self> {
        if !(hfov > 0.0 && hfov < std::f64::consts::PI) {
            return Err(Error::InvalidParameter(format!(
                "field of view {hfov} rad outside (0, pi)"
            )));
        }
        let f = (width as f64 / 2.0) / (hfov / 2.0).tan();
        Self::from_focal(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
        )
    }

    /// Parse a row-major 9-tuple.
    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        row_major(&self.matrix)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &Matrix3<f64> {
        &self.inverse
    }

    pub fn fx(&self) -> f64 {
        self.matrix[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.matrix[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.matrix[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.matrix[(1, 2)]
    }

    /// Perspective projection `K * p / z`. Returns `None` behind the camera.
    pub fn project(&self, p: CameraPoint) -> Option<PixelPoint> {
        if p.z <= 0.0 {
            return None;
        }
        let q = self.matrix * p.to_vector();
        Some(PixelPoint::new(q.x / q.z, q.y / q.z))
    }
}

/// Rigid transform mapping camera-frame points into the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose3D {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("rotation determinant {det}")));
        }
        let gram = rotation * rotation.transpose();
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ORTHO_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (max |R R^T - I| = {dev:e})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about the ego `z` axis by `yaw`, then translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: yaw_matrix(yaw),
            translation,
        }
    }

    /// Ego-from-camera pose for a camera at `translation` looking along the
    /// ground-plane heading `yaw`, with camera `y` pointing down.
    pub fn looking_along(yaw: f64, translation: Vector3<f64>) -> Self {
        // Columns are the camera axes expressed in the ego frame.
        let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        Self {
            rotation: yaw_matrix(yaw) * base,
            translation,
        }
    }

    pub fn from_parts(rotation: &[f64; 9], translation: &[f64; 3]) -> Result<Self> {
        Self::new(
            Matrix3::from_row_slice(rotation),
            Vector3::from_column_slice(translation),
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        row_major(&self.rotation)
    }

    pub fn translation_array(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    /// Map an ego-frame point into the camera frame.
    pub fn ego_to_camera(&self, p: Vector3<f64>) -> CameraPoint {
        CameraPoint::from_vector(self.rotation.transpose() * (p - self.translation))
    }
}

/// A calibrated camera in the rig.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose3D,
}

fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

/// One elementary image-plane operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    /// Horizontal mirror of an image `width` pixels wide: `x -> (width - 1) - x`.
    Flip { width: f64 },
    /// Isotropic scaling about the origin.
    Scale { factor: f64 },
    /// Counter-clockwise (in pixel axes) rotation about `pivot`.
    Rotate { angle: f64, pivot: [f64; 2] },
    /// Crop whose top-left corner sits at `offset`: `p -> p - offset`.
    Crop { offset: [f64; 2] },
}

impl AugOp {
    fn matrix(&self) -> Result<Matrix3<f64>> {
        match *self {
            AugOp::Flip { width } => {
                if !(width.is_finite() && width > 0.0) {
                    return Err(Error::InvalidParameter(format!("flip width {width}")));
                }
                Ok(Matrix3::new(
                    -1.0,
                    0.0,
                    width - 1.0,
                    0.0,
                    1.0,
                    0.0,
                    0.0,
                    0.0,
                    1.0,
                ))
            }
            AugOp::Scale { factor } => {
                if !(factor.is_finite() && factor > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "scale factor {factor} must be positive"
                    )));
                }
                Ok(Matrix3::new(
                    factor, 0.0, 0.0, 0.0, factor, 0.0, 0.0, 0.0, 1.0,
                ))
            }
            AugOp::Rotate { angle, pivot } => {
                if !angle.is_finite() || pivot.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter("non-finite rotation".into()));
                }
                let (s, c) = angle.sin_cos();
                let [px, py] = pivot;
                Ok(Matrix3::new(
                    c,
                    -s,
                    px - (c * px - s * py),
                    s,
                    c,
                    py - (s * px + c * py),
                    0.0,
                    0.0,
                    1.0,
                ))
            }
            AugOp::Crop { offset } => {
                if offset.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter("non-finite crop offset".into()));
                }
                Ok(Matrix3::new(
                    1.0, 0.0, -offset[0], 0.0, 1.0, -offset[1], 0.0, 0.0, 1.0,
                ))
            }
        }
    }
}

/// A 3x3 homogeneous image-plane transform together with the operations it
/// was composed from.
#[derive(Debug, Clone, PartialEq)]
pub struct AugTransform2D {
    matrix: Matrix3<f64>,
    inverse: Matrix3<f64>,
    ops: Vec<AugOp>,
}

impl AugTransform2D {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
            inverse: Matrix3::identity(),
            ops: Vec::new(),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn inverse_matrix(&self) -> &Matrix3<f64> {
        &self.inverse
    }

    pub fn ops(&self) -> &[AugOp] {
        &self.ops
    }

    pub fn is_flipped(&self) -> bool {
        self.ops.iter().any(|op| matches!(op, AugOp::Flip { .. }))
    }

    pub fn scale(&self) -> f64 {
        self.ops
            .iter()
            .filter_map(|op| match op {
                AugOp::Scale { factor } => Some(*factor),
                _ => None,
            })
            .product()
    }

    pub fn rotation(&self) -> f64 {
        self.ops
            .iter()
            .filter_map(|op| match op {
                AugOp::Rotate { angle, .. } => Some(*angle),
                _ => None,
            })
            .sum()
    }

    pub fn crop_offset(&self) -> [f64; 2] {
        self.ops.iter().fold([0.0, 0.0], |acc, op| match op {
            AugOp::Crop { offset } => [acc[0] + offset[0], acc[1] + offset[1]],
            _ => acc,
        })
    }

    /// `A * p`.
    pub fn apply(&self, p: PixelPoint) -> PixelPoint {
        let q = self.matrix * p.homogeneous();
        PixelPoint::new(q.x, q.y)
    }

    /// `A^-1 * p`.
    pub fn apply_inverse(&self, p: PixelPoint) -> PixelPoint {
        let q = self.inverse * p.homogeneous();
        PixelPoint::new(q.x, q.y)
    }
}

/// Compose elementary operations, applied to points in list order: the first
/// operation acts first, so the matrix is `M_n * ... * M_2 * M_1`.
pub fn compose_aug(ops: &[AugOp]) -> Result<AugTransform2D> {
    let mut matrix = Matrix3::identity();
    for op in ops {
        matrix = op.matrix()? * matrix;
    }
    let inverse = matrix
        .try_inverse()
        .ok_or(Error::Singular("augmentation transform"))?;
    Ok(AugTransform2D {
        matrix,
        inverse,
        ops: ops.to_vec(),
    })
}

/// Lift pixel `p` at depth `d` into the camera frame: `K^-1 * (p * d)`.
pub fn pixel_to_camera(p: PixelPoint, d: f64, k: &CameraIntrinsics) -> Result<CameraPoint> {
    check_depth(d)?;
    Ok(CameraPoint::from_vector(k.inverse() * (p.homogeneous() * d)))
}

/// Lift a pixel of an augmented image: `K^-1 * (A^-1 * p_aug * d)`.
pub fn unproject_augmented(
    p_aug: PixelPoint,
    d: f64,
    k: &CameraIntrinsics,
    aug: &AugTransform2D,
) -> Result<CameraPoint> {
    check_depth(d)?;
    let src = aug.inverse_matrix() * p_aug.homogeneous();
    Ok(CameraPoint::from_vector(k.inverse() * (src * d)))
}

pub fn camera_to_ego(p: CameraPoint, pose: &Pose3D) -> Vector3<f64> {
    pose.rotation() * p.to_vector() + pose.translation()
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    if a > -PI && a <= PI {
        return a;
    }
    let w = a - TAU * ((a + PI) / TAU).floor();
    if w <= -PI {
        w + TAU
    } else if w > PI {
        w - TAU
    } else {
        w
    }
}

fn check_depth(d: f64) -> Result<()> {
    if d.is_finite() && d > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidDepth(d))
    }
}
