//! Synthetic scene generation and the JSON Lines dataset schema.
//!
//! Scenes sample joint angles uniformly within their limits and place the
//! robot base at a uniformly random orientation on a random ray through the
//! central image region, at a distance of [`MIN_DISTANCE_M`] to
//! [`MAX_DISTANCE_M`]; draws are rejected until at least half of the model
//! points project inside the image. Observed per-part 3D/2D targets are the
//! exact projections of the ground-truth state, so estimators with identity
//! correspondences can be scored against a known answer.
//!
//! Files are JSON Lines (UTF-8, one object per line) with an explicit header
//! line carrying `schema_version`, the generating seed and the run
//! configuration; scenes and refinement traces reuse the same header type.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

use crate::camera::{project, Intrinsics};
use crate::estimator::{
    part_poses_in_camera, BoundingBox, IterationStep, Observation, ObservedPart, RefinementTrace,
    RobotState,
};
use crate::geometry::{euler_xyz_to_matrix, PoseUpdate, RigidTransform};
use crate::kinematics::{forward_kinematics, JointConfig, RobotModel};
use crate::metrics::LossBreakdown;

pub const SCHEMA_VERSION: u32 = 1;

/// Base-distance range the generator samples from, meters.
pub const MIN_DISTANCE_M: f64 = 0.8;
pub const MAX_DISTANCE_M: f64 = 2.4;
/// Minimum fraction of model points that must project inside the image.
pub const MIN_VISIBLE_FRACTION: f64 = 0.5;
const MAX_REJECTIONS: usize = 1000;

/// State perturbation scales used to fabricate imperfect estimates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Translation noise per axis, meters.
    pub translation_sigma_m: f64,
    /// Rotation noise per Euler angle, degrees.
    pub rotation_sigma_deg: f64,
    /// Joint noise as a fraction of each joint's range of motion.
    pub joint_sigma_fraction: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            translation_sigma_m: 0.10,
            rotation_sigma_deg: 60.0,
            joint_sigma_fraction: 0.05,
        }
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("no in-frustum placement found after {0} rejection-sampling tries")]
    FrustumRejectionExhausted(usize),
    #[error("schema version mismatch: file has {got}, expected {expected}")]
    SchemaVersionMismatch { got: u32, expected: u32 },
    #[error("missing header line")]
    MissingHeader,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] crate::kinematics::ModelError),
}

/// One synthetic image worth of data: ground truth plus the derived
/// observation targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub seed: u64,
    pub camera: Intrinsics,
    pub gt_state: RobotState,
    pub detection: WireBBox,
    pub parts: Vec<WirePart>,
}

/// Detection box on the wire: center and size, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireBBox {
    pub center: [f64; 2],
    pub size: [f64; 2],
}

impl From<BoundingBox> for WireBBox {
    fn from(b: BoundingBox) -> Self {
        Self {
            center: [b.center.x, b.center.y],
            size: [b.size.x, b.size.y],
        }
    }
}

impl From<WireBBox> for BoundingBox {
    fn from(w: WireBBox) -> Self {
        Self {
            center: Vector2::new(w.center[0], w.center[1]),
            size: Vector2::new(w.size[0], w.size[1]),
        }
    }
}

/// Observed targets of one part, indexed like its model points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePart {
    pub points3d: Vec<[f64; 3]>,
    pub points2d: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl Scene {
    /// Build the estimator-facing observation. Measured joints are included
    /// only for known-joints runs; ground truth rides along for oracles and
    /// evaluation.
    pub fn observation(&self, known_joints: bool) -> Observation {
        Observation {
            camera: self.camera,
            detection: self.detection.into(),
            parts: self
                .parts
                .iter()
                .map(|p| ObservedPart {
                    points3d: p.points3d.iter().map(|&[x, y, z]| Vector3::new(x, y, z)).collect(),
                    points2d: p.points2d.iter().map(|&[x, y]| Vector2::new(x, y)).collect(),
                    visible: p.visible.clone(),
                })
                .collect(),
            measured_joints: known_joints.then(|| self.gt_state.q.clone()),
            ground_truth: Some(self.gt_state.clone()),
        }
    }
}

/// The deterministic generator used throughout: callers derive one stream
/// per scene from a master seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniformly random rotation from a normalized 4D Gaussian quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
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

/// Sample a ground-truth scene: uniform joints, random in-frustum base
/// placement, tight detection box, exact observed targets.
pub fn sample_scene(
    model: &RobotModel,
    camera: &Intrinsics,
    rng: &mut ChaCha8Rng,
) -> Result<Scene, SceneError> {
    let q = JointConfig(
        model
            .joints()
            .iter()
            .map(|j| rng.random_range(j.lower..j.upper))
            .collect(),
    );

    // Robot centroid in the root frame for this joint vector.
    let fk = forward_kinematics(model, &q)?;
    let mut centroid_root = Vector3::zeros();
    for (part, pose) in model.parts().iter().zip(&fk) {
        for p in &part.points {
            centroid_root += pose.transform_point(p);
        }
    }
    centroid_root /= model.total_points() as f64;

    for _ in 0..MAX_REJECTIONS {
        let rotation = random_rotation(rng);
        // Aim the centroid at a pixel in the central image region.
        let u = rng.random_range(0.3 * camera.width as f64..0.7 * camera.width as f64);
        let v = rng.random_range(0.3 * camera.height as f64..0.7 * camera.height as f64);
        let distance = rng.random_range(MIN_DISTANCE_M..MAX_DISTANCE_M);
        let dir = Vector3::new((u - camera.c_x) / camera.f_x, (v - camera.c_y) / camera.f_y, 1.0)
            .normalize();
        let centroid_cam = dir * distance;

        let state = RobotState {
            anchor: 0,
            pose: RigidTransform::new(rotation, centroid_cam - rotation * centroid_root),
            q: q.clone(),
        };

        let poses = part_poses_in_camera(model, &state)?;
        let mut parts = Vec::with_capacity(model.num_parts());
        let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut in_image = 0usize;
        for (part, pose) in model.parts().iter().zip(&poses) {
            let points3d = pose.transform_points(&part.points);
            let projected = project(&points3d, camera);
            let mut points2d = Vec::with_capacity(projected.len());
            let mut visible = Vec::with_capacity(projected.len());
            for p in &projected {
                let vis = p.valid && camera.contains(&p.uv);
                if vis {
                    in_image += 1;
                    lo = lo.inf(&p.uv);
                    hi = hi.sup(&p.uv);
                }
                points2d.push([p.uv.x, p.uv.y]);
                visible.push(vis);
            }
            parts.push(WirePart {
                points3d: points3d.iter().map(|p| [p.x, p.y, p.z]).collect(),
                points2d,
                visible,
            });
        }

        if (in_image as f64) < MIN_VISIBLE_FRACTION * model.total_points() as f64 {
            continue;
        }

        let center = (lo + hi) / 2.0;
        let size = hi - lo;
        return Ok(Scene {
            scene_id: 0,
            seed: 0,
            camera: *camera,
            gt_state: state,
            detection: WireBBox {
                center: [center.x, center.y],
                size: [size.x, size.y],
            },
            parts,
        });
    }
    Err(SceneError::FrustumRejectionExhausted(MAX_REJECTIONS))
}

/// Gaussian-perturb a state: additive translation noise per axis, an Euler
/// rotation composed onto the orientation, and per-joint noise scaled by the
/// range of motion, clamped to the limits.
pub fn perturb_state(
    state: &RobotState,
    config: &PerturbationConfig,
    model: &RobotModel,
    rng: &mut ChaCha8Rng,
) -> RobotState {
    let mut out = state.clone();
    let normal = |sigma: f64, rng: &mut ChaCha8Rng| -> f64 {
        if sigma > 0.0 {
            let g: f64 = StandardNormal.sample(rng);
            g * sigma
        } else {
            0.0
        }
    };

    let st = config.translation_sigma_m;
    out.pose.translation += Vector3::new(normal(st, rng), normal(st, rng), normal(st, rng));

    let sr = config.rotation_sigma_deg.to_radians();
    if config.rotation_sigma_deg > 0.0 {
        let noise = euler_xyz_to_matrix(normal(sr, rng), normal(sr, rng), normal(sr, rng));
        out.pose.rotation = noise * out.pose.rotation;
    }

    for (v, j) in out.q.0.iter_mut().zip(model.joints()) {
        let sigma = config.joint_sigma_fraction * (j.upper - j.lower);
        *v = (*v + normal(sigma, rng)).clamp(j.lower, j.upper);
    }
    out
}

// --- wire formats ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WireTransform {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WireTransform {
            rotation: self.rotation_rows(),
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = WireTransform::deserialize(d)?;
        Ok(RigidTransform::from_rows(w.rotation, w.translation))
    }
}

#[derive(Serialize, Deserialize)]
struct WireState {
    anchor: usize,
    pose: RigidTransform,
    q: Vec<f64>,
}

impl Serialize for RobotState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WireState {
            anchor: self.anchor,
            pose: self.pose,
            q: self.q.0.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RobotState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = WireState::deserialize(d)?;
        Ok(RobotState {
            anchor: w.anchor,
            pose: w.pose,
            q: JointConfig(w.q),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WireUpdate {
    v: [f64; 3],
    rotation: [[f64; 3]; 3],
}

impl Serialize for PoseUpdate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let r = RigidTransform::new(self.delta_r, Vector3::zeros());
        WireUpdate {
            v: [self.v_x, self.v_y, self.v_z],
            rotation: r.rotation_rows(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PoseUpdate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = WireUpdate::deserialize(d)?;
        let t = RigidTransform::from_rows(w.rotation, [0.0; 3]);
        Ok(PoseUpdate {
            v_x: w.v[0],
            v_y: w.v[1],
            v_z: w.v[2],
            delta_r: t.rotation,
        })
    }
}

/// First line of every dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileHeader {
    pub schema_version: u32,
    /// "scenes" or "traces".
    pub kind: String,
    pub seed: u64,
    /// Full generating configuration, for byte-reproducible reruns.
    pub config: serde_json::Value,
}

impl FileHeader {
    pub fn new(kind: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            seed,
            config,
        }
    }

    fn check(&self) -> Result<(), SceneError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(SceneError::SchemaVersionMismatch {
                got: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        Ok(())
    }
}

/// One trace line: iteration 0 is the initial state and carries no update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub scene_id: u64,
    pub iteration: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchor: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update: Option<PoseUpdate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_q: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossBreakdown>,
    pub state: RobotState,
}

/// Flatten a trace into one record per state, initial state first.
pub fn trace_to_records(scene_id: u64, trace: &RefinementTrace) -> Vec<TraceRecord> {
    let mut records = vec![TraceRecord {
        scene_id,
        iteration: 0,
        anchor: None,
        reference: None,
        update: None,
        delta_q: None,
        loss: None,
        state: trace.initial.clone(),
    }];
    for (i, step) in trace.steps.iter().enumerate() {
        records.push(TraceRecord {
            scene_id,
            iteration: i + 1,
            anchor: Some(step.anchor),
            reference: Some([step.reference.x, step.reference.y, step.reference.z]),
            update: Some(step.update.clone()),
            delta_q: Some(step.delta_q.clone()),
            loss: step.loss,
            state: step.state.clone(),
        });
    }
    records
}

/// Rebuild a trace from its records (sorted by iteration).
pub fn trace_from_records(mut records: Vec<TraceRecord>) -> Option<RefinementTrace> {
    records.sort_by_key(|r| r.iteration);
    let first = records.first()?;
    if first.iteration != 0 {
        return None;
    }
    let initial = first.state.clone();
    let steps = records
        .into_iter()
        .skip(1)
        .map(|r| {
            Some(IterationStep {
                anchor: r.anchor?,
                reference: {
                    let v = r.reference?;
                    Vector3::new(v[0], v[1], v[2])
                },
                update: r.update?,
                delta_q: r.delta_q?,
                loss: r.loss,
                state: r.state,
            })
        })
        .collect::<Option<Vec<_>>>()?;
    Some(RefinementTrace { initial, steps })
}

pub fn write_scenes<W: Write>(
    mut w: W,
    header: &FileHeader,
    scenes: &[Scene],
) -> Result<(), SceneError> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for scene in scenes {
        serde_json::to_writer(&mut w, scene)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_scenes<R: BufRead>(r: R) -> Result<(FileHeader, Vec<Scene>), SceneError> {
    let mut lines = r.lines();
    let header: FileHeader =
        serde_json::from_str(&lines.next().ok_or(SceneError::MissingHeader)??)?;
    header.check()?;
    let mut scenes = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(serde_json::from_str(&line)?);
    }
    Ok((header, scenes))
}

pub fn write_traces<W: Write>(
    mut w: W,
    header: &FileHeader,
    records: &[TraceRecord],
) -> Result<(), SceneError> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces<R: BufRead>(r: R) -> Result<(FileHeader, Vec<TraceRecord>), SceneError> {
    let mut lines = r.lines();
    let header: FileHeader =
        serde_json::from_str(&lines.next().ok_or(SceneError::MissingHeader)??)?;
    header.check()?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok((header, records))
}
