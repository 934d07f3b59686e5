//! The iterative refinement engine.
//!
//! A [`RobotState`] fixes an *anchor part*, the anchor's pose with respect to
//! the camera, and the joint angles. Each iteration re-anchors the state
//! (possibly to a freshly sampled anchor), picks a reference point, renders
//! the current estimate into the crop window, asks a [`Refiner`] for a
//! correction, and applies it: the pose through the reference-point update of
//! [`crate::geometry::apply_pose_update`], the joints additively with
//! clamping to limits. The full per-iteration history is returned as a
//! [`RefinementTrace`].

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::{
    compute_crop, crop_camera, project, CameraError, Intrinsics, CROP_ASPECT, CROP_ENLARGE,
};
use crate::geometry::{
    apply_pose_update, solve_exact_update, GeometryError, PoseUpdate, RigidTransform,
};
use crate::kinematics::{
    forward_kinematics, largest_parts, midrange_config, robot_centroid, JointConfig, ModelError,
    RobotModel,
};
use crate::metrics::{disentangled_pose_loss, LossBreakdown};
use crate::render::{render, RenderOutput};

/// Depth of the first centroid hypothesis during initialization, meters.
pub const INITIAL_DEPTH_GUESS_M: f64 = 1.0;

/// Full state of the robot: anchor selection, anchor pose, joint angles.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    /// Id of the anchor part whose pose represents the robot placement.
    pub anchor: usize,
    /// Anchor-frame to camera-frame transform.
    pub pose: RigidTransform,
    /// Joint angles, radians.
    pub q: JointConfig,
}

/// Axis-aligned detection box in full-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub center: Vector2<f64>,
    pub size: Vector2<f64>,
}

/// Observed target points of one part, indexed like the part's model points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservedPart {
    /// Camera-frame 3D targets.
    pub points3d: Vec<Vector3<f64>>,
    /// Image-plane targets, pixels.
    pub points2d: Vec<Vector2<f64>>,
    /// Whether each 2D target was inside the image and in front of the camera.
    pub visible: Vec<bool>,
}

/// Everything the estimator knows about one image of the robot.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub camera: Intrinsics,
    pub detection: BoundingBox,
    /// Per-part targets with point identities; empty when unavailable.
    pub parts: Vec<ObservedPart>,
    /// Joint angles measured on the robot, for known-joints operation.
    pub measured_joints: Option<JointConfig>,
    /// Ground-truth state, available in synthetic scenes.
    pub ground_truth: Option<RobotState>,
}

/// How the anchor part is chosen at each iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorStrategy {
    Fixed(usize),
    /// Uniform draw among the n largest parts by volume.
    RandomAmongLargest(usize),
    RandomAll,
}

/// How the reference point of the pose update is chosen at each iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceStrategy {
    /// Centroid of the currently estimated robot.
    RobotCentroid,
    /// Origin of a fixed part under the current estimate.
    PartOrigin(usize),
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    /// Number of refinement iterations K.
    pub iterations: usize,
    pub anchor: AnchorStrategy,
    pub reference: ReferenceStrategy,
    /// Freeze joint angles at their measured values.
    pub known_joints: bool,
    pub rng_seed: u64,
    /// Crop render resolution; width / height must equal the crop aspect.
    pub crop_width: u32,
    pub crop_height: u32,
    /// Base orientation used at initialization; identity when unset.
    pub init_rotation: Option<Matrix3<f64>>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            anchor: AnchorStrategy::RandomAmongLargest(5),
            reference: ReferenceStrategy::RobotCentroid,
            known_joints: false,
            rng_seed: 0,
            crop_width: 320,
            crop_height: 240,
            init_rotation: None,
        }
    }
}

/// One applied refinement step.
#[derive(Debug, Clone)]
pub struct IterationStep {
    pub anchor: usize,
    /// Reference point used for the update, camera frame.
    pub reference: Vector3<f64>,
    pub update: PoseUpdate,
    pub delta_q: Vec<f64>,
    /// Loss of this prediction against ground truth, when available.
    pub loss: Option<LossBreakdown>,
    /// State after applying the step.
    pub state: RobotState,
}

/// Initial state plus every applied step; `iterations + 1` states in total.
#[derive(Debug, Clone)]
pub struct RefinementTrace {
    pub initial: RobotState,
    pub steps: Vec<IterationStep>,
}

impl RefinementTrace {
    pub fn states(&self) -> impl Iterator<Item = &RobotState> {
        std::iter::once(&self.initial).chain(self.steps.iter().map(|s| &s.state))
    }

    pub fn final_state(&self) -> &RobotState {
        self.steps.last().map(|s| &s.state).unwrap_or(&self.initial)
    }
}

#[derive(Debug, Error)]
pub enum RefinerError {
    #[error("ground truth unavailable")]
    MissingGroundTruth,
    #[error("observation lacks per-part point correspondences")]
    MissingCorrespondences,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("degenerate detection box (zero size)")]
    DegenerateDetection,
    #[error("no model point projects in front of the camera at initialization")]
    EmptyInitialProjection,
    #[error("known-joints mode requires measured joint angles in the observation")]
    MissingMeasuredJoints,
    #[error("iterations must be >= 1")]
    ZeroIterations,
    #[error("iteration {iteration}: {source}")]
    Refiner {
        iteration: usize,
        source: RefinerError,
    },
    #[error("iteration {iteration}: {source}")]
    Camera {
        iteration: usize,
        source: CameraError,
    },
    #[error("iteration {iteration}: {source}")]
    Geometry {
        iteration: usize,
        source: GeometryError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A refinement abort carrying the iterations completed before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct RefineFailure {
    pub error: EstimatorError,
    /// Diagnostic trace of everything applied before the abort.
    pub partial: Box<RefinementTrace>,
}

/// Everything handed to a [`Refiner`] for one prediction.
pub struct PredictInput<'a> {
    pub model: &'a RobotModel,
    pub observation: &'a Observation,
    /// Current state, already re-anchored to this iteration's anchor.
    pub state: &'a RobotState,
    pub render: &'a RenderOutput,
    /// Intrinsics of the virtual cropped camera the update pixels refer to.
    pub crop_camera: &'a Intrinsics,
    /// Reference point of the pose update, camera frame.
    pub reference: Vector3<f64>,
    pub known_joints: bool,
}

/// The predicted state correction for one iteration.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub update: PoseUpdate,
    /// Joint-angle increments; ignored in known-joints mode.
    pub delta_q: Vec<f64>,
}

/// A state-correction predictor.
///
/// Implementations must be callable concurrently unless [`Refiner::exclusive`]
/// returns true, in which case callers serialize predictions.
pub trait Refiner: Sync {
    fn predict(
        &self,
        input: &PredictInput<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Prediction, RefinerError>;

    fn exclusive(&self) -> bool {
        false
    }
}

/// Pose of every part in the camera frame: `T_C,p = pose ∘ rel(anchor, p)`.
pub fn part_poses_in_camera(
    model: &RobotModel,
    state: &RobotState,
) -> Result<Vec<RigidTransform>, ModelError> {
    model.check_part_id(state.anchor)?;
    let fk = forward_kinematics(model, &state.q)?;
    let anchor_inv = fk[state.anchor].invert();
    Ok(fk
        .iter()
        .map(|pose| state.pose.compose(&anchor_inv).compose(pose))
        .collect())
}

/// Rewrite `state` for a different anchor without moving the robot: the new
/// pose is `T_C,a ∘ rel(a, a')` and all part world poses are unchanged.
pub fn reanchor(
    state: &RobotState,
    new_anchor: usize,
    model: &RobotModel,
) -> Result<RobotState, ModelError> {
    model.check_part_id(new_anchor)?;
    if new_anchor == state.anchor {
        return Ok(state.clone());
    }
    let rel = crate::kinematics::relative_part_transform(model, &state.q, state.anchor, new_anchor)?;
    Ok(RobotState {
        anchor: new_anchor,
        pose: state.pose.compose(&rel),
        q: state.q.clone(),
    })
}

/// Draw an anchor id according to the strategy.
pub fn select_anchor(
    strategy: &AnchorStrategy,
    model: &RobotModel,
    rng: &mut ChaCha8Rng,
) -> Result<usize, ModelError> {
    match strategy {
        AnchorStrategy::Fixed(id) => {
            model.check_part_id(*id)?;
            Ok(*id)
        }
        AnchorStrategy::RandomAmongLargest(n) => {
            let ids = largest_parts(model, *n)?;
            Ok(ids[rng.random_range(0..ids.len())])
        }
        AnchorStrategy::RandomAll => Ok(rng.random_range(0..model.num_parts())),
    }
}

/// State a detection is refined from: joints at mid-range, base axes aligned
/// with the camera, centroid back-projected from the detection center at a
/// 1 m depth guess, then the depth rescaled once so the projected robot box
/// matches the detection size.
pub fn initialize_state(
    model: &RobotModel,
    detection: &BoundingBox,
    k: &Intrinsics,
) -> Result<RobotState, EstimatorError> {
    initialize_state_with(model, detection, k, midrange_config(model), Matrix3::identity())
}

pub(crate) fn initialize_state_with(
    model: &RobotModel,
    detection: &BoundingBox,
    k: &Intrinsics,
    q: JointConfig,
    base_rotation: Matrix3<f64>,
) -> Result<RobotState, EstimatorError> {
    if detection.size.x <= 0.0 || detection.size.y <= 0.0 {
        return Err(EstimatorError::DegenerateDetection);
    }

    // Centroid of the robot in the root frame for this joint vector.
    let fk = forward_kinematics(model, &q)?;
    let mut centroid_root = Vector3::zeros();
    let mut count = 0usize;
    for (part, pose) in model.parts().iter().zip(&fk) {
        for p in &part.points {
            centroid_root += pose.transform_point(p);
            count += 1;
        }
    }
    centroid_root /= count as f64;

    let back_project = |z: f64| {
        Vector3::new(
            (detection.center.x - k.c_x) * z / k.f_x,
            (detection.center.y - k.c_y) * z / k.f_y,
            z,
        )
    };

    let place = |z: f64| RobotState {
        anchor: 0,
        pose: RigidTransform::new(base_rotation, back_project(z) - base_rotation * centroid_root),
        q: q.clone(),
    };

    // Project the guess and rescale the depth so the projected box matches
    // the detection size (mean of the two per-axis ratios).
    let guess = place(INITIAL_DEPTH_GUESS_M);
    let poses = part_poses_in_camera(model, &guess)?;
    let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut any = false;
    for (part, pose) in model.parts().iter().zip(&poses) {
        for p in project(&pose.transform_points(&part.points), k) {
            if p.valid {
                any = true;
                lo = lo.inf(&p.uv);
                hi = hi.sup(&p.uv);
            }
        }
    }
    if !any {
        return Err(EstimatorError::EmptyInitialProjection);
    }
    let guess_size = hi - lo;
    let z = INITIAL_DEPTH_GUESS_M
        * 0.5
        * (guess_size.x / detection.size.x + guess_size.y / detection.size.y);
    Ok(place(z))
}

/// Run the full refinement from the detection-based initial state.
pub fn refine(
    observation: &Observation,
    model: &RobotModel,
    refiner: &dyn Refiner,
    config: &EstimatorConfig,
) -> Result<RefinementTrace, RefineFailure> {
    let fail = |error| RefineFailure {
        error,
        partial: Box::new(RefinementTrace {
            initial: RobotState {
                anchor: 0,
                pose: RigidTransform::identity(),
                q: JointConfig(Vec::new()),
            },
            steps: Vec::new(),
        }),
    };

    let q0 = if config.known_joints {
        match &observation.measured_joints {
            Some(q) => q.clone(),
            None => return Err(fail(EstimatorError::MissingMeasuredJoints)),
        }
    } else {
        midrange_config(model)
    };
    let rot = config.init_rotation.unwrap_or_else(Matrix3::identity);
    let initial =
        initialize_state_with(model, &observation.detection, &observation.camera, q0, rot)
            .map_err(&fail)?;
    refine_from(observation, model, refiner, config, initial)
}

/// Run the refinement loop from an explicit initial state.
pub fn refine_from(
    observation: &Observation,
    model: &RobotModel,
    refiner: &dyn Refiner,
    config: &EstimatorConfig,
    initial: RobotState,
) -> Result<RefinementTrace, RefineFailure> {
    let mut trace = RefinementTrace {
        initial: initial.clone(),
        steps: Vec::new(),
    };
    let abort = |error, trace: &RefinementTrace| RefineFailure {
        error,
        partial: Box::new(trace.clone()),
    };
    if config.iterations == 0 {
        return Err(abort(EstimatorError::ZeroIterations, &trace));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut state = initial;
    let k = &observation.camera;

    for iteration in 0..config.iterations {
        let anchor = select_anchor(&config.anchor, model, &mut rng)
            .map_err(|e| abort(EstimatorError::Model(e), &trace))?;
        state = reanchor(&state, anchor, model)
            .map_err(|e| abort(EstimatorError::Model(e), &trace))?;

        let reference = match config.reference {
            ReferenceStrategy::RobotCentroid => robot_centroid(model, &state)
                .map_err(|e| abort(EstimatorError::Model(e), &trace))?,
            ReferenceStrategy::PartOrigin(p) => {
                let poses = part_poses_in_camera(model, &state)
                    .map_err(|e| abort(EstimatorError::Model(e), &trace))?;
                match poses.get(p) {
                    Some(pose) => pose.translation,
                    None => {
                        return Err(abort(
                            EstimatorError::Model(ModelError::InvalidPartId(p)),
                            &trace,
                        ))
                    }
                }
            }
        };
        if reference.z <= 0.0 {
            return Err(abort(
                EstimatorError::Geometry {
                    iteration,
                    source: GeometryError::ReferenceBehindCamera { z: reference.z },
                },
                &trace,
            ));
        }

        // Crop around the projected reference point.
        let poses = part_poses_in_camera(model, &state)
            .map_err(|e| abort(EstimatorError::Model(e), &trace))?;
        let mut projected = Vec::with_capacity(model.total_points());
        for (part, pose) in model.parts().iter().zip(&poses) {
            projected.extend(project(&pose.transform_points(&part.points), k));
        }
        let center = project(&[reference], k)[0].uv;
        let crop = compute_crop(&projected, center, CROP_ASPECT, CROP_ENLARGE)
            .map_err(|e| abort(EstimatorError::Camera { iteration, source: e }, &trace))?;
        let crop_k = crop_camera(k, &crop, config.crop_width, config.crop_height)
            .map_err(|e| abort(EstimatorError::Camera { iteration, source: e }, &trace))?;
        let rendered = render(model, &state, k, &crop, config.crop_width, config.crop_height)
            .map_err(|e| abort(EstimatorError::Model(e), &trace))?;

        let input = PredictInput {
            model,
            observation,
            state: &state,
            render: &rendered,
            crop_camera: &crop_k,
            reference,
            known_joints: config.known_joints,
        };
        let prediction = refiner
            .predict(&input, &mut rng)
            .map_err(|e| abort(EstimatorError::Refiner { iteration, source: e }, &trace))?;

        // Loss of this prediction against ground truth, for the trace.
        let loss = observation.ground_truth.as_ref().and_then(|gt| {
            let gt_re = reanchor(gt, anchor, model).ok()?;
            let gt_update =
                solve_exact_update(&state.pose, &gt_re.pose, &reference, crop_k.focals()).ok()?;
            let (xy, z, r) = disentangled_pose_loss(
                &prediction.update,
                &gt_update,
                &state.pose,
                &reference,
                crop_k.focals(),
                &model.parts()[anchor].points,
            )
            .ok()?;
            let q_res: f64 = state
                .q
                .0
                .iter()
                .zip(&prediction.delta_q)
                .zip(&gt.q.0)
                .map(|((q, dq), qg)| {
                    let d = if config.known_joints { q - qg } else { q + dq - qg };
                    d * d
                })
                .sum();
            Some(LossBreakdown::new(xy, z, r, q_res, 1.0))
        });

        let pose = apply_pose_update(
            &state.pose,
            &prediction.update,
            &reference,
            crop_k.focals(),
        )
        .map_err(|e| abort(EstimatorError::Geometry { iteration, source: e }, &trace))?;

        let mut q = state.q.clone();
        if !config.known_joints {
            for (v, d) in q.0.iter_mut().zip(&prediction.delta_q) {
                *v += d;
            }
            model.clamp_joints(&mut q);
        }

        state = RobotState { anchor, pose, q };
        trace.steps.push(IterationStep {
            anchor,
            reference,
            update: prediction.update,
            delta_q: prediction.delta_q,
            loss,
            state: state.clone(),
        });
    }

    Ok(trace)
}
