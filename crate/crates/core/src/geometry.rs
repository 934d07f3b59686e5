//! Rigid-transform algebra and the reference-point parametrized pose update.
//!
//! A pose correction is expressed by four quantities relative to a 3D
//! *reference point* `O` given in the camera frame: `v_x`, `v_y` move the
//! projection of `O` by that many pixels in the (virtual, cropped) image
//! plane, `v_z` rescales the depth of `O` multiplicatively, and `delta_r`
//! rotates the body *about* `O`. [`apply_pose_update`] turns these into a new
//! camera-frame pose; [`solve_exact_update`] is its exact inverse, recovering
//! the unique parameters that map one pose onto another.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    /// The two direction vectors of a [`RotationParam`] are near zero or near
    /// parallel and cannot span a rotation.
    #[error("degenerate rotation parameters (near-zero or near-parallel columns)")]
    DegenerateRotationParam,
    /// The reference point sits at or behind the camera plane (z <= 0).
    #[error("reference point behind camera (z = {z})")]
    ReferenceBehindCamera { z: f64 },
    /// The requested target pose would move the reference point to or behind
    /// the camera plane, where no update parameters exist.
    #[error("no valid update: target places reference point at z = {z}")]
    NoValidUpdate { z: f64 },
}

/// Focal lengths of the (virtual, cropped) camera the pixel offsets
/// `v_x`/`v_y` are expressed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Focals {
    pub x: f64,
    pub y: f64,
}

/// A rigid transform: rotation followed by translation.
///
/// Conventionally maps points from a body frame into the camera frame, so the
/// `translation` is the body origin expressed in camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
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

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> Self {
        let rot_inv = self.rotation.transpose();
        Self {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_points(&self, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        points.iter().map(|p| self.transform_point(p)).collect()
    }

    /// Max deviation of the rotation block from orthonormality
    /// (`|RᵀR - I|` entrywise) plus `|det R - 1|`.
    pub fn rotation_defect(&self) -> f64 {
        let g = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let ortho = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ortho.max((self.rotation.determinant() - 1.0).abs())
    }

    pub fn rotation_rows(&self) -> [[f64; 3]; 3] {
        let r = &self.rotation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ]
    }

    pub fn from_rows(rows: [[f64; 3]; 3], translation: [f64; 3]) -> Self {
        Self {
            rotation: Matrix3::from_rows(&[
                rows[0].into(),
                rows[1].into(),
                rows[2].into(),
            ]),
            translation: Vector3::new(translation[0], translation[1], translation[2]),
        }
    }
}

/// Re-orthonormalize a near-rotation matrix by Gram-Schmidt on its columns.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c1 = m.column(0).into_owned();
    let c2 = m.column(1).into_owned();
    let c1 = c1 / c1.norm();
    let c2 = c2 - c1.dot(&c2) * c1;
    let c2 = c2 / c2.norm();
    let c3 = c1.cross(&c2);
    Matrix3::from_columns(&[c1, c2, c3])
}

/// Two 3-vectors interpreted as the first two columns of a rotation matrix
/// before orthonormalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationParam {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
}

const PARAM_EPS: f64 = 1e-8;

/// Build a rotation from a [`RotationParam`] by Gram-Schmidt: the first
/// column is `normalize(a)`, the second the normalized rejection of `b`, the
/// third their cross product.
pub fn rotation_from_param(p: &RotationParam) -> Result<Matrix3<f64>, GeometryError> {
    let na = p.a.norm();
    if na < PARAM_EPS {
        return Err(GeometryError::DegenerateRotationParam);
    }
    let c1 = p.a / na;
    let rej = p.b - c1.dot(&p.b) * c1;
    let nr = rej.norm();
    if nr < PARAM_EPS {
        return Err(GeometryError::DegenerateRotationParam);
    }
    let c2 = rej / nr;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// The predicted correction of an anchor pose: pixel displacement of the
/// reference point's projection, a multiplicative depth update, and a
/// rotation applied about the reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseUpdate {
    /// Horizontal displacement of the reference point in crop pixels.
    pub v_x: f64,
    /// Vertical displacement of the reference point in crop pixels.
    pub v_y: f64,
    /// Depth ratio of the reference point after/before the update (> 0).
    pub v_z: f64,
    /// Rotation applied about the reference point, in the camera frame.
    pub delta_r: Matrix3<f64>,
}

impl PoseUpdate {
    /// The update that leaves any pose unchanged.
    pub fn identity() -> Self {
        Self {
            v_x: 0.0,
            v_y: 0.0,
            v_z: 1.0,
            delta_r: Matrix3::identity(),
        }
    }
}

/// Camera-frame translation gained by the reference point under an update.
fn reference_shift(u: &PoseUpdate, o: &Vector3<f64>, f: Focals) -> Vector3<f64> {
    Vector3::new(
        u.v_x * u.v_z * o.z / f.x + o.x * (u.v_z - 1.0),
        u.v_y * u.v_z * o.z / f.y + o.y * (u.v_z - 1.0),
        o.z * (u.v_z - 1.0),
    )
}

/// Apply a [`PoseUpdate`] to a body-to-camera pose `t` about the camera-frame
/// reference point `o`.
///
/// Every camera-frame point `p` rigidly attached to the body moves to
/// `delta_r * (p - o) + o + dt`, where `dt` is the translation gained by the
/// reference point; the rotation block becomes `delta_r * R`. The returned
/// rotation is re-orthonormalized so chained updates do not drift.
pub fn apply_pose_update(
    t: &RigidTransform,
    u: &PoseUpdate,
    o: &Vector3<f64>,
    f: Focals,
) -> Result<RigidTransform, GeometryError> {
    if o.z <= 0.0 {
        return Err(GeometryError::ReferenceBehindCamera { z: o.z });
    }
    let dt = reference_shift(u, o, f);
    let rotation = orthonormalize(&(u.delta_r * t.rotation));
    let translation = u.delta_r * (t.translation - o) + o + dt;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Recover the unique [`PoseUpdate`] that maps `current` onto `target` about
/// the reference point `o` (camera frame, z > 0).
///
/// The rotation part is always `R_target * R_currentᵀ`, independent of `o`;
/// the pixel and depth parameters follow from where `target ∘ current⁻¹`
/// transports `o`.
pub fn solve_exact_update(
    current: &RigidTransform,
    target: &RigidTransform,
    o: &Vector3<f64>,
    f: Focals,
) -> Result<PoseUpdate, GeometryError> {
    if o.z <= 0.0 {
        return Err(GeometryError::ReferenceBehindCamera { z: o.z });
    }
    let delta_r = target.rotation * current.rotation.transpose();
    // o transported by the camera-frame motion target ∘ current⁻¹.
    let o_new = target.translation + delta_r * (o - current.translation);
    if o_new.z <= 0.0 {
        return Err(GeometryError::NoValidUpdate { z: o_new.z });
    }
    Ok(PoseUpdate {
        v_x: f.x * (o_new.x / o_new.z - o.x / o.z),
        v_y: f.y * (o_new.y / o_new.z - o.y / o.z),
        v_z: o_new.z / o.z,
        delta_r,
    })
}

/// Rodrigues formula: rotation matrix of the axis-angle vector `w`.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-12 {
        // Second-order series; exact enough below the threshold.
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let k = k / theta;
    Matrix3::identity() + theta.sin() * k + (1.0 - theta.cos()) * (k * k)
}

/// Axis-angle vector of a rotation matrix. Handles angles near 0 and near pi.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta < 1e-10 {
        // w ~ vee(R - Rᵀ) / 2 for small angles.
        return Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        ) / 2.0;
    }
    if theta < std::f64::consts::PI - 1e-6 {
        let axis = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        ) / (2.0 * theta.sin());
        return axis * theta;
    }
    // Near pi: extract the axis from the dominant diagonal of R + I.
    let b = r + Matrix3::identity();
    let (i, _) = (0..3)
        .map(|i| (i, b[(i, i)]))
        .max_by(|a, c| a.1.total_cmp(&c.1))
        .unwrap();
    let col = b.column(i).into_owned();
    let axis = col / col.norm();
    // Fix the sign so that exp matches r in the off-diagonal skew part.
    let s = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let axis = if s.dot(&axis) < 0.0 { -axis } else { axis };
    axis * theta
}

/// Geodesic interpolation from `a` towards `b` by fraction `s` in [0, 1].
pub fn interpolate_rotation(a: &Matrix3<f64>, b: &Matrix3<f64>, s: f64) -> Matrix3<f64> {
    let w = so3_log(&(b * a.transpose()));
    orthonormalize(&(so3_exp(&(w * s)) * a))
}

/// Rotation angle in radians between two rotations.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let cos = (((b * a.transpose()).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos()
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rotation matrix `Rx(x) * Ry(y) * Rz(z)` (intrinsic x-y-z convention).
pub fn euler_xyz_to_matrix(x: f64, y: f64, z: f64) -> Matrix3<f64> {
    let (sx, cx) = x.sin_cos();
    let (sy, cy) = y.sin_cos();
    let (sz, cz) = z.sin_cos();
    Matrix3::new(
        cy * cz,
        -cy * sz,
        sy,
        cx * sz + sx * sy * cz,
        cx * cz - sx * sy * sz,
        -sx * cy,
        sx * sz - cx * sy * cz,
        sx * cz + cx * sy * sz,
        cx * cy,
    )
}

/// Euler angles (x, y, z) of a rotation in the intrinsic x-y-z convention,
/// with x, z in (-pi, pi] and y in [-pi/2, pi/2].
pub fn matrix_to_euler_xyz(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let sy = r[(0, 2)].clamp(-1.0, 1.0);
    let y = sy.asin();
    if sy.abs() > 1.0 - 1e-12 {
        // Gimbal lock: only x - z (or x + z) is determined; put it all in x.
        let x = r[(1, 0)].atan2(r[(1, 1)]);
        return (x, y, 0.0);
    }
    let x = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let z = (-r[(0, 1)]).atan2(r[(0, 0)]);
    (x, y, z)
}
