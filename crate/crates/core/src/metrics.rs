//! Training-style losses and the evaluation metric suite.
//!
//! The pose loss is *disentangled*: each of the image-plane, depth and
//! rotation blocks of a predicted update is scored with the other blocks
//! fixed at their exact values, so an error in one block moves exactly one
//! term. Evaluation metrics cover keypoint 3D distance (ADD) with its
//! area-under-curve aggregate, 2D keypoint accuracy (PCK), and per-component
//! pose/joint error breakdowns.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{part_poses_in_camera, RobotState};
use crate::geometry::{
    apply_pose_update, matrix_to_euler_xyz, Focals, GeometryError, PoseUpdate, RigidTransform,
};
use crate::kinematics::{ModelError, RobotModel};

/// Balance between the pose terms and the squared joint residual in
/// [`LossBreakdown::total`] and [`total_loss`].
pub const DEFAULT_JOINT_LOSS_WEIGHT: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty point set")]
    EmptyPointSet,
    #[error("empty input")]
    EmptyInput,
    #[error("no visible keypoints")]
    NoVisibleKeypoints,
    #[error("keypoint lists have different lengths ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
}

/// Per-iteration loss components; the pose terms are anchor-point mean L1
/// distances in meters, `loss_q` is a squared joint residual in rad².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_xy: f64,
    pub loss_z: f64,
    pub loss_r: f64,
    pub loss_q: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(loss_xy: f64, loss_z: f64, loss_r: f64, loss_q: f64, lambda: f64) -> Self {
        Self {
            loss_xy,
            loss_z,
            loss_r,
            loss_q,
            total: loss_xy + loss_z + loss_r + lambda * loss_q,
        }
    }
}

/// Mean L1 distance between two placements of the anchor points:
/// `mean_x |T1 x - T2 x|_1`.
pub fn anchor_distance(
    t1: &RigidTransform,
    t2: &RigidTransform,
    anchor_points: &[Vector3<f64>],
) -> Result<f64, MetricError> {
    if anchor_points.is_empty() {
        return Err(MetricError::EmptyPointSet);
    }
    let sum: f64 = anchor_points
        .iter()
        .map(|x| (t1.transform_point(x) - t2.transform_point(x)).abs().sum())
        .sum();
    Ok(sum / anchor_points.len() as f64)
}

/// The three disentangled pose-loss terms `(loss_xy, loss_z, loss_r)` of a
/// predicted update against the exact one.
///
/// Each term applies a hybrid update where only the scored block comes from
/// the prediction, and measures the anchor-point distance to the pose reached
/// by the exact update.
pub fn disentangled_pose_loss(
    prediction: &PoseUpdate,
    exact: &PoseUpdate,
    current: &RigidTransform,
    reference: &Vector3<f64>,
    f: Focals,
    anchor_points: &[Vector3<f64>],
) -> Result<(f64, f64, f64), GeometryError> {
    let target = apply_pose_update(current, exact, reference, f)?;
    let distance = |u: &PoseUpdate| -> Result<f64, GeometryError> {
        let t = apply_pose_update(current, u, reference, f)?;
        Ok(anchor_distance(&t, &target, anchor_points).unwrap_or(0.0))
    };
    let loss_xy = distance(&PoseUpdate {
        v_x: prediction.v_x,
        v_y: prediction.v_y,
        v_z: exact.v_z,
        delta_r: exact.delta_r,
    })?;
    let loss_z = distance(&PoseUpdate {
        v_x: exact.v_x,
        v_y: exact.v_y,
        v_z: prediction.v_z,
        delta_r: exact.delta_r,
    })?;
    let loss_r = distance(&PoseUpdate {
        v_x: exact.v_x,
        v_y: exact.v_y,
        v_z: exact.v_z,
        delta_r: prediction.delta_r,
    })?;
    Ok((loss_xy, loss_z, loss_r))
}

/// Sum of per-iteration losses with the joint term weighted by `lambda`:
/// `Σ_k [pose terms + lambda * loss_q]`.
pub fn total_loss(iterations: &[LossBreakdown], lambda: f64) -> f64 {
    iterations
        .iter()
        .map(|l| l.loss_xy + l.loss_z + l.loss_r + lambda * l.loss_q)
        .sum()
}

/// 3D keypoints of a state: the base origin plus each joint origin (the
/// child-part frame origin), placed in the camera frame.
pub fn joint_keypoints(
    model: &RobotModel,
    state: &RobotState,
) -> Result<Vec<Vector3<f64>>, ModelError> {
    let poses = part_poses_in_camera(model, state)?;
    let mut keypoints = Vec::with_capacity(model.dof() + 1);
    keypoints.push(poses[0].translation);
    for joint in model.joints() {
        keypoints.push(poses[joint.child].translation);
    }
    Ok(keypoints)
}

/// Mean 3D distance between corresponding joint keypoints of two states.
pub fn add_error(
    model: &RobotModel,
    predicted: &RobotState,
    ground_truth: &RobotState,
) -> Result<f64, ModelError> {
    let a = joint_keypoints(model, predicted)?;
    let b = joint_keypoints(model, ground_truth)?;
    let sum: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).norm()).sum();
    Ok(sum / a.len() as f64)
}

/// Area under the pass-rate-vs-threshold curve up to `threshold_max`,
/// computed exactly from the sorted-error step function and normalized to
/// [0, 1].
pub fn add_auc(errors: &[f64], threshold_max: f64) -> Result<f64, MetricError> {
    if errors.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    // passrate(t) = |{e <= t}| / n integrates to sum of (t_max - e) clamped;
    // dividing per element keeps the constant-error cases exact.
    let sum: f64 = errors
        .iter()
        .map(|&e| ((threshold_max - e.max(0.0)).max(0.0) / threshold_max).min(1.0))
        .sum();
    Ok(sum / errors.len() as f64)
}

/// Fraction of visible keypoints whose reprojection error is below
/// `fraction * normalizer` pixels.
pub fn pck(
    predicted: &[Vector2<f64>],
    ground_truth: &[Vector2<f64>],
    visible: &[bool],
    normalizer: f64,
    fraction: f64,
) -> Result<f64, MetricError> {
    if predicted.len() != ground_truth.len() || predicted.len() != visible.len() {
        return Err(MetricError::LengthMismatch {
            a: predicted.len(),
            b: ground_truth.len().max(visible.len()),
        });
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for ((p, g), &vis) in predicted.iter().zip(ground_truth).zip(visible) {
        if !vis {
            continue;
        }
        total += 1;
        if (p - g).norm() < fraction * normalizer {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(MetricError::NoVisibleKeypoints);
    }
    Ok(hits as f64 / total as f64)
}

/// Base-pose and joint error breakdown between two states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorReport {
    /// Mean absolute per-axis base translation error, centimeters.
    pub trans_xyz_cm: f64,
    /// Euclidean base translation error, centimeters.
    pub trans_norm_cm: f64,
    /// Mean absolute base Euler-angle error (intrinsic x-y-z), degrees.
    pub rot_euler_deg: f64,
    /// Mean absolute joint-angle error, degrees.
    pub joint_deg: f64,
}

/// Compare the base-part (part 0) poses and joint vectors of two states.
pub fn pose_error_report(
    predicted: &RobotState,
    ground_truth: &RobotState,
    model: &RobotModel,
) -> Result<PoseErrorReport, ModelError> {
    let base_p = part_poses_in_camera(model, predicted)?[0];
    let base_g = part_poses_in_camera(model, ground_truth)?[0];

    let dt = base_p.translation - base_g.translation;
    let trans_xyz_cm = dt.abs().sum() / 3.0 * 100.0;
    let trans_norm_cm = dt.norm() * 100.0;

    let (px, py, pz) = matrix_to_euler_xyz(&base_p.rotation);
    let (gx, gy, gz) = matrix_to_euler_xyz(&base_g.rotation);
    let rot_euler_deg =
        ((px - gx).abs() + (py - gy).abs() + (pz - gz).abs()) / 3.0 * 180.0 / std::f64::consts::PI;

    let joint_deg = if predicted.q.is_empty() {
        0.0
    } else {
        predicted
            .q
            .0
            .iter()
            .zip(&ground_truth.q.0)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / predicted.q.len() as f64
            * 180.0
            / std::f64::consts::PI
    };

    Ok(PoseErrorReport {
        trans_xyz_cm,
        trans_norm_cm,
        rot_euler_deg,
        joint_deg,
    })
}

/// Aggregate metric report over a set of evaluated scenes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Per-scene ADD errors, meters.
    pub add_errors: Vec<f64>,
    /// ADD pass-rate area under curve in [0, 1].
    pub add_auc: f64,
    /// Mean PCK fraction over scenes.
    pub pck: f64,
    /// Mean per-scene error breakdowns.
    pub trans_xyz_cm: f64,
    pub trans_norm_cm: f64,
    pub rot_euler_deg: f64,
    pub joint_deg: f64,
}
