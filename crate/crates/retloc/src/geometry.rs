//! Planar vehicle poses, 3-D rigid transforms, and the pinhole camera model.
//!
//! Conventions used throughout the crate:
//!
//! * World frame: X/Y ground plane, Z up. A vehicle pose is `(x, y, psi)`
//!   with `psi` measured counter-clockwise from +X.
//! * Vehicle frame: X forward, Y left, Z up.
//! * Camera frame: computer-vision convention — +Z along the optical axis,
//!   +X right, +Y down.
//!
//! [`MountingTransform`] maps between the vehicle and camera frames;
//! [`planar_to_camera`] / [`camera_to_planar`] convert a planar pose into a
//! full camera pose and back.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Depth below which a point counts as behind the camera.
pub const Z_MIN: f64 = 1e-6;

/// Rotation-matrix orthonormality tolerance accepted by constructors.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    /// The supplied matrix is not a proper rotation (orthonormal, det +1).
    #[error("matrix is not a rotation: orthonormality defect {defect:.3e}, det {det:.6}")]
    NotARotation { defect: f64, det: f64 },
    /// Focal lengths and image dimensions must be strictly positive.
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Wraps an angle to the half-open interval `(-pi, pi]`.
///
/// `pi` maps to `pi` and `-pi` maps to `pi`, so the representative of each
/// equivalence class is unique.
pub fn wrap_angle(theta: f64) -> f64 {
    // Already in range: return unchanged, bit for bit. This keeps wrapping
    // idempotent at full precision, which persistence roundtrips rely on.
    if theta > -std::f64::consts::PI && theta <= std::f64::consts::PI {
        return theta;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = theta.rem_euclid(two_pi); // [0, 2*pi)
    if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// A planar vehicle pose `(x, y, psi)` in the world frame.
///
/// `psi` is kept wrapped to `(-pi, pi]` by every constructor and operation,
/// which is why the field is private. Deserialization wraps too, so poses
/// read from config files or logs uphold the invariant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    psi: f64,
}

impl<'de> Deserialize<'de> for PlanarPose {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            x: f64,
            y: f64,
            psi: f64,
        }
        let raw = Raw::deserialize(deserializer)?;
        Ok(PlanarPose::new(raw.x, raw.y, raw.psi))
    }
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            psi: wrap_angle(psi),
        }
    }

    /// Heading in `(-pi, pi]`, counter-clockwise from +X.
    pub fn psi(&self) -> f64 {
        self.psi
    }

    /// Euclidean distance between the position parts of two poses.
    pub fn distance(&self, other: &Self) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Smallest signed heading difference `other.psi - self.psi`, wrapped.
    pub fn heading_to(&self, other: &Self) -> f64 {
        wrap_angle(other.psi - self.psi)
    }
}

impl Default for PlanarPose {
    fn default() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }
}

/// A rigid transform `p_out = R * p_in + t` between two 3-D frames.
///
/// The rotation is stored as a plain matrix; constructors reject anything
/// whose orthonormality defect or determinant error exceeds [`ROTATION_TOL`].
/// Internally produced transforms (composition, inversion) skip the check —
/// drift over long chains stays far below the tolerance in f64.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let defect = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        let det = rotation.determinant();
        if defect > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::NotARotation { defect, det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a transform without the orthonormality check. Callers must
    /// guarantee the matrix is a proper rotation.
    pub(crate) fn new_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about the world Z axis by `psi` radians, no translation.
    pub fn rot_z(psi: f64) -> Self {
        let (s, c) = psi.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Orthonormality defect `||R^T R - I||`; useful for drift diagnostics.
    pub fn orthonormality_defect(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }
}

/// Pinhole camera intrinsics. Distortion is assumed corrected upstream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point must be finite, got cx={cx}, cy={cy}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Projects a camera-frame point to pixels, or `None` if the point lies
    /// behind the camera (`z <= Z_MIN`). No image-bounds clipping is applied;
    /// callers that need it check against `width`/`height` themselves.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p_cam.z <= Z_MIN {
            return None;
        }
        Some(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// Jacobian of the projection with respect to the camera-frame point.
    ///
    /// Only valid for points in front of the camera; callers check
    /// [`CameraIntrinsics::project`] first.
    pub fn project_jacobian(&self, p_cam: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / p_cam.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p_cam.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p_cam.y * iz2,
        )
    }

    /// Horizontal field of view in radians: `2 * atan(width / (2 * fx))`.
    pub fn hfov(&self) -> f64 {
        2.0 * (self.width as f64 / (2.0 * self.fx)).atan()
    }
}

/// Where the camera sits on the vehicle: the vehicle→camera transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MountingTransform {
    vehicle_to_camera: RigidTransform3,
}

impl MountingTransform {
    pub fn new(vehicle_to_camera: RigidTransform3) -> Self {
        Self { vehicle_to_camera }
    }

    /// Identity mounting: the camera frame coincides with the vehicle frame.
    /// Mostly useful in tests, where it keeps expectations easy to read.
    pub fn identity() -> Self {
        Self {
            vehicle_to_camera: RigidTransform3::identity(),
        }
    }

    /// A forward-looking camera `height` meters above the vehicle origin.
    ///
    /// The optical axis points along vehicle +X, so the rotation maps
    /// vehicle (X fwd, Y left, Z up) to camera (X right, Y down, Z forward):
    /// cam X = -veh Y, cam Y = -veh Z, cam Z = veh X.
    pub fn forward_camera(height: f64) -> Self {
        let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let c = Vector3::new(0.0, 0.0, height); // camera center in vehicle frame
        Self {
            vehicle_to_camera: RigidTransform3::new_unchecked(r, -(r * c)),
        }
    }

    pub fn vehicle_to_camera(&self) -> &RigidTransform3 {
        &self.vehicle_to_camera
    }

    pub fn camera_to_vehicle(&self) -> RigidTransform3 {
        self.vehicle_to_camera.inverse()
    }
}

impl Default for MountingTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// The vehicle→world transform for a planar pose: `Rz(psi)` plus the pose
/// translation at ground height.
pub fn vehicle_to_world(pose: &PlanarPose) -> RigidTransform3 {
    let mut t = RigidTransform3::rot_z(pose.psi());
    t.translation = Vector3::new(pose.x, pose.y, 0.0);
    t
}

/// Full camera pose in the world (camera→world transform) for a vehicle at
/// `pose` with the given mounting.
pub fn planar_to_camera(pose: &PlanarPose, mounting: &MountingTransform) -> RigidTransform3 {
    vehicle_to_world(pose).compose(&mounting.camera_to_vehicle())
}

/// Inverse of [`planar_to_camera`]: recovers the planar vehicle pose from a
/// camera→world transform. Roll/pitch and height of the camera pose are
/// discarded; the heading comes from the vehicle +X axis projected onto the
/// ground plane.
pub fn camera_to_planar(camera_to_world: &RigidTransform3, mounting: &MountingTransform) -> PlanarPose {
    let veh = camera_to_world.compose(mounting.vehicle_to_camera());
    let r = veh.rotation();
    PlanarPose::new(
        veh.translation().x,
        veh.translation().y,
        r[(1, 0)].atan2(r[(0, 0)]),
    )
}

/// Mean of angles by summing unit vectors; `None` when the resultant is too
/// short to define a direction (e.g. two opposite angles).
pub fn circular_mean(angles: &[f64]) -> Option<f64> {
    circular_mean_weighted(angles, None)
}

/// Weighted circular mean. `weights == None` means uniform. The resultant
/// vector must have norm above 1e-12 relative to the total weight.
pub fn circular_mean_weighted(angles: &[f64], weights: Option<&[f64]>) -> Option<f64> {
    if angles.is_empty() {
        return None;
    }
    let mut sum = Vector2::zeros();
    let mut total_w = 0.0;
    for (i, &a) in angles.iter().enumerate() {
        let w = weights.map_or(1.0, |ws| ws[i]);
        let (s, c) = a.sin_cos();
        sum += w * Vector2::new(c, s);
        total_w += w;
    }
    if total_w <= 0.0 || sum.norm() <= 1e-12 * total_w.max(1.0) {
        return None;
    }
    Some(sum.y.atan2(sum.x))
}

/// 2x2 covariance of planar positions plus scalar variance of headings
/// (about their circular mean). Used by diagnostics and tests.
pub fn planar_spread(poses: &[PlanarPose]) -> Option<(Matrix2<f64>, f64)> {
    if poses.is_empty() {
        return None;
    }
    let n = poses.len() as f64;
    let mx = poses.iter().map(|p| p.x).sum::<f64>() / n;
    let my = poses.iter().map(|p| p.y).sum::<f64>() / n;
    let mut cov = Matrix2::zeros();
    for p in poses {
        let d = Vector2::new(p.x - mx, p.y - my);
        cov += d * d.transpose();
    }
    cov /= n;
    let mean_psi = circular_mean(&poses.iter().map(|p| p.psi()).collect::<Vec<_>>())?;
    let var_psi = poses
        .iter()
        .map(|p| wrap_angle(p.psi() - mean_psi).powi(2))
        .sum::<f64>()
        / n;
    Some((cov, var_psi))
}
