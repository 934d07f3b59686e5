//! Concrete [`Refiner`] implementations.
//!
//! [`OracleRefiner`] reads the ground-truth state from the observation and
//! emits the exact correction, optionally damped by a step fraction and
//! corrupted with noise proportional to the size of the remaining correction
//! (a stand-in for a predictor whose relative accuracy is roughly constant).
//! [`LsqRefiner`] ignores ground truth and aligns the model points to the
//! observed targets with a damped Gauss-Newton solver over the pose-update
//! parameters and the joint angles jointly.

use nalgebra::{DMatrix, DVector, Vector3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::project;
use crate::estimator::{
    part_poses_in_camera, reanchor, PredictInput, Prediction, Refiner, RefinerError, RobotState,
};
use crate::geometry::{
    apply_pose_update, interpolate_rotation, rotation_angle_between, so3_exp, solve_exact_update,
    PoseUpdate, RigidTransform,
};
/// Reference error scales the oracle noise ratios are expressed against:
/// a configured sigma equal to the reference scale means the prediction error
/// is as large as the predicted correction itself.
pub const REF_TRANSLATION_SIGMA_M: f64 = 0.10;
pub const REF_ROTATION_SIGMA_DEG: f64 = 60.0;
pub const REF_JOINT_SIGMA_FRACTION: f64 = 0.05;

/// Noise and damping of the oracle predictor.
#[derive(Debug, Clone, Copy)]
pub struct OracleConfig {
    /// Rotation noise scale, degrees (see module docs for semantics).
    pub rotation_sigma_deg: f64,
    /// Translation noise scale, meters.
    pub translation_sigma_m: f64,
    /// Joint noise scale as a fraction of each joint's range of motion.
    pub joint_sigma_fraction: f64,
    /// Fraction of the exact correction applied per prediction, in (0, 1].
    pub step_fraction: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            rotation_sigma_deg: 0.0,
            translation_sigma_m: 0.0,
            joint_sigma_fraction: 0.0,
            step_fraction: 1.0,
        }
    }
}

impl OracleConfig {
    /// Noise at the reference scales with a given step fraction.
    pub fn noisy(step_fraction: f64) -> Self {
        Self {
            rotation_sigma_deg: REF_ROTATION_SIGMA_DEG,
            translation_sigma_m: REF_TRANSLATION_SIGMA_M,
            joint_sigma_fraction: REF_JOINT_SIGMA_FRACTION,
            step_fraction,
        }
    }
}

/// Emits the exact update towards the observation's ground-truth state,
/// scaled by the step fraction, with optional prediction noise.
///
/// The noise is drawn per prediction with a standard deviation proportional
/// to the magnitude of the scaled correction: the configured sigmas give the
/// error observed when the correction sits at the reference scales
/// (10 cm / 60 degrees / 5% of joint range), so predictions degrade
/// gracefully instead of imposing an absolute error floor near convergence.
#[derive(Debug, Clone, Default)]
pub struct OracleRefiner {
    pub config: OracleConfig,
}

impl OracleRefiner {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn new(config: OracleConfig) -> Self {
        Self { config }
    }
}

impl Refiner for OracleRefiner {
    fn predict(
        &self,
        input: &PredictInput<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Prediction, RefinerError> {
        let gt = input
            .observation
            .ground_truth
            .as_ref()
            .ok_or(RefinerError::MissingGroundTruth)?;
        let gt = reanchor(gt, input.state.anchor, input.model)?;
        let cfg = &self.config;
        let s = cfg.step_fraction;
        let cur = &input.state.pose;

        // Step-fraction interpolation towards the ground truth.
        let (mut rot, mut trans) = if (s - 1.0).abs() < f64::EPSILON {
            (gt.pose.rotation, gt.pose.translation)
        } else {
            (
                interpolate_rotation(&cur.rotation, &gt.pose.rotation, s),
                cur.translation + s * (gt.pose.translation - cur.translation),
            )
        };
        let mut q_target: Vec<f64> = input
            .state
            .q
            .0
            .iter()
            .zip(&gt.q.0)
            .map(|(q, qg)| q + s * (qg - q))
            .collect();

        // Prediction noise proportional to the applied correction.
        if cfg.translation_sigma_m > 0.0 {
            let step = s * (gt.pose.translation - cur.translation).norm();
            let sigma = cfg.translation_sigma_m / REF_TRANSLATION_SIGMA_M * step / 3f64.sqrt();
            if sigma > 0.0 {
                let n = Normal::new(0.0, sigma).expect("sigma is finite and positive");
                trans += Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
            }
        }
        if cfg.rotation_sigma_deg > 0.0 {
            let step = s * rotation_angle_between(&cur.rotation, &gt.pose.rotation);
            let sigma = cfg.rotation_sigma_deg / REF_ROTATION_SIGMA_DEG * step / 3f64.sqrt();
            if sigma > 0.0 {
                let n = Normal::new(0.0, sigma).expect("sigma is finite and positive");
                let w = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
                rot = so3_exp(&w) * rot;
            }
        }
        if !input.known_joints && cfg.joint_sigma_fraction > 0.0 {
            for (i, qt) in q_target.iter_mut().enumerate() {
                let step = (s * (gt.q.0[i] - input.state.q.0[i])).abs();
                let sigma = cfg.joint_sigma_fraction / REF_JOINT_SIGMA_FRACTION * step;
                if sigma > 0.0 {
                    let n = Normal::new(0.0, sigma).expect("sigma is finite and positive");
                    *qt += n.sample(rng);
                }
            }
        }

        let target = RigidTransform::new(rot, trans);
        let update = solve_exact_update(
            cur,
            &target,
            &input.reference,
            input.crop_camera.focals(),
        )?;
        let delta_q = q_target
            .iter()
            .zip(&input.state.q.0)
            .map(|(t, q)| t - q)
            .collect();
        Ok(Prediction { update, delta_q })
    }
}

/// Residual space the least-squares refiner minimizes over.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ResidualKind {
    /// Camera-frame 3D distances between model points and observed targets.
    #[default]
    Point3d,
    /// Image-plane reprojection distances against the observed 2D targets,
    /// visible points only.
    Reprojection2d,
}

#[derive(Debug, Clone, Copy)]
pub struct LsqConfig {
    /// Gauss-Newton steps per prediction.
    pub max_inner_iterations: usize,
    /// Initial Levenberg damping added to the normal equations.
    pub damping: f64,
    /// Central finite-difference step in parameter space.
    pub fd_step: f64,
    pub residual: ResidualKind,
}

impl Default for LsqConfig {
    fn default() -> Self {
        Self {
            max_inner_iterations: 4,
            damping: 1e-4,
            fd_step: 1e-6,
            residual: ResidualKind::Point3d,
        }
    }
}

/// Damped Gauss-Newton alignment of the model points to the observed targets
/// with correspondences by point identity.
///
/// The optimization variables are the pose-update parameters (pixel offsets,
/// log depth ratio, rotation exponential coordinates) and the joint-angle
/// increments, solved jointly; the emitted update is exactly the optimized
/// parameter vector. Jacobians come from central finite differences through
/// the update application and the forward kinematics.
#[derive(Debug, Clone, Default)]
pub struct LsqRefiner {
    pub config: LsqConfig,
}

impl LsqRefiner {
    pub fn new(config: LsqConfig) -> Self {
        Self { config }
    }
}

pub(crate) struct LsqProblem<'a> {
    input: &'a PredictInput<'a>,
    kind: ResidualKind,
    /// 6 pose parameters plus one per joint unless joints are frozen.
    dim: usize,
}

impl<'a> LsqProblem<'a> {
    pub(crate) fn new(input: &'a PredictInput<'a>, kind: ResidualKind) -> Result<Self, RefinerError> {
        let obs = &input.observation.parts;
        if obs.len() != input.model.num_parts() {
            return Err(RefinerError::MissingCorrespondences);
        }
        for (part, o) in input.model.parts().iter().zip(obs) {
            let needed = part.points.len();
            let have = match kind {
                ResidualKind::Point3d => o.points3d.len(),
                ResidualKind::Reprojection2d => o.points2d.len().min(o.visible.len()),
            };
            if have != needed {
                return Err(RefinerError::MissingCorrespondences);
            }
        }
        let dim = if input.known_joints {
            6
        } else {
            6 + input.model.dof()
        };
        Ok(Self {
            input,
            kind,
            dim,
        })
    }

    pub(crate) fn dim(&self) -> usize {
        self.dim
    }

    fn candidate_state(&self, theta: &DVector<f64>) -> RobotState {
        let update = update_from_params(theta);
        let pose = apply_pose_update(
            &self.input.state.pose,
            &update,
            &self.input.reference,
            self.input.crop_camera.focals(),
        )
        .expect("reference validated by the engine");
        let mut q = self.input.state.q.clone();
        if !self.input.known_joints {
            for (i, v) in q.0.iter_mut().enumerate() {
                *v += theta[6 + i];
            }
        }
        RobotState {
            anchor: self.input.state.anchor,
            pose,
            q,
        }
    }

    pub(crate) fn residuals(&self, theta: &DVector<f64>) -> DVector<f64> {
        let state = self.candidate_state(theta);
        let poses = part_poses_in_camera(self.input.model, &state)
            .expect("state dimensions fixed by construction");
        let mut out = Vec::new();
        for ((part, obs), pose) in self
            .input
            .model
            .parts()
            .iter()
            .zip(&self.input.observation.parts)
            .zip(&poses)
        {
            match self.kind {
                ResidualKind::Point3d => {
                    for (x, target) in part.points.iter().zip(&obs.points3d) {
                        let d = pose.transform_point(x) - target;
                        out.extend_from_slice(&[d.x, d.y, d.z]);
                    }
                }
                ResidualKind::Reprojection2d => {
                    let cam_points = pose.transform_points(&part.points);
                    let projected = project(&cam_points, &self.input.observation.camera);
                    for ((p, target), &vis) in
                        projected.iter().zip(&obs.points2d).zip(&obs.visible)
                    {
                        if vis && p.valid {
                            out.push(p.uv.x - target.x);
                            out.push(p.uv.y - target.y);
                        }
                    }
                }
            }
        }
        DVector::from_vec(out)
    }

    pub(crate) fn jacobian_central(&self, theta: &DVector<f64>, h: f64) -> DMatrix<f64> {
        let m = self.residuals(theta).len();
        let mut j = DMatrix::zeros(m, self.dim);
        for col in 0..self.dim {
            let mut plus = theta.clone();
            plus[col] += h;
            let mut minus = theta.clone();
            minus[col] -= h;
            let d = (self.residuals(&plus) - self.residuals(&minus)) / (2.0 * h);
            j.set_column(col, &d);
        }
        j
    }

    #[cfg(test)]
    pub(crate) fn jacobian_forward(&self, theta: &DVector<f64>, h: f64) -> DMatrix<f64> {
        let r0 = self.residuals(theta);
        let mut j = DMatrix::zeros(r0.len(), self.dim);
        for col in 0..self.dim {
            let mut plus = theta.clone();
            plus[col] += h;
            let d = (self.residuals(&plus) - &r0) / h;
            j.set_column(col, &d);
        }
        j
    }
}

fn update_from_params(theta: &DVector<f64>) -> PoseUpdate {
    PoseUpdate {
        v_x: theta[0],
        v_y: theta[1],
        v_z: theta[2].exp(),
        delta_r: so3_exp(&Vector3::new(theta[3], theta[4], theta[5])),
    }
}

/// Run the damped Gauss-Newton loop; returns the optimized parameters and the
/// cost after every accepted step (the initial cost first).
pub(crate) fn gauss_newton(problem: &LsqProblem<'_>, config: &LsqConfig) -> (DVector<f64>, Vec<f64>) {
    let mut theta = DVector::zeros(problem.dim());
    let mut residual = problem.residuals(&theta);
    let mut cost = residual.norm_squared();
    let mut costs = vec![cost];
    let mut lambda = config.damping;

    'outer: for _ in 0..config.max_inner_iterations {
        if cost < 1e-24 {
            break;
        }
        let jac = problem.jacobian_central(&theta, config.fd_step);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &residual;

        // Marquardt scaling keeps the damping proportionate across pixel,
        // log-depth and radian parameters.
        let diag = DMatrix::from_fn(problem.dim(), problem.dim(), |i, j| {
            if i == j {
                jtj[(i, i)].max(1e-12)
            } else {
                0.0
            }
        });

        // A rejected step raises the damping tenfold, up to five retries.
        let mut attempt = 0usize;
        loop {
            let damped = &jtj + &diag * lambda;
            let Some(step) = damped.lu().solve(&(-&jtr)) else {
                log::warn!("singular normal equations in least-squares refiner; keeping state");
                break 'outer;
            };
            let candidate = &theta + &step;
            let cand_residual = problem.residuals(&candidate);
            let cand_cost = cand_residual.norm_squared();
            if cand_cost <= cost {
                theta = candidate;
                residual = cand_residual;
                cost = cand_cost;
                costs.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                if step.norm() < 1e-14 {
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            attempt += 1;
            if attempt >= 5 {
                break 'outer;
            }
        }
    }
    (theta, costs)
}

impl Refiner for LsqRefiner {
    fn predict(
        &self,
        input: &PredictInput<'_>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Prediction, RefinerError> {
        let problem = LsqProblem::new(input, self.config.residual)?;
        if problem.residuals(&DVector::zeros(problem.dim())).is_empty() {
            return Err(RefinerError::MissingCorrespondences);
        }
        let (theta, _costs) = gauss_newton(&problem, &self.config);
        let update = update_from_params(&theta);
        let delta_q = if input.known_joints {
            vec![0.0; input.model.dof()]
        } else {
            (0..input.model.dof()).map(|i| theta[6 + i]).collect()
        };
        Ok(Prediction { update, delta_q })
    }
}

/// Convenience: exact update magnitudes between two states, used by tests and
/// the iteration-sweep study.
pub fn state_errors(
    model: &crate::kinematics::RobotModel,
    a: &RobotState,
    b: &RobotState,
) -> (f64, f64, f64) {
    let pa = part_poses_in_camera(model, a).unwrap();
    let pb = part_poses_in_camera(model, b).unwrap();
    let trans = (pa[0].translation - pb[0].translation).norm();
    let rot = rotation_angle_between(&pa[0].rotation, &pb[0].rotation);
    let joints = a
        .q
        .0
        .iter()
        .zip(&b.q.0)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    (trans, rot, joints)
}

#[allow(unused_imports)]
use crate::kinematics::RobotModel;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{compute_crop, crop_camera, Intrinsics, CROP_ASPECT, CROP_ENLARGE};
    use crate::estimator::{BoundingBox, Observation, ObservedPart};
    use crate::kinematics::test_models::{panda_like, planar_arm};
    use crate::kinematics::{JointConfig, JointSpec, PartSpec};
    use crate::render::render;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector2};
    use rand::{Rng, SeedableRng};

    fn vga() -> Intrinsics {
        Intrinsics {
            f_x: 500.0,
            f_y: 500.0,
            c_x: 320.0,
            c_y: 240.0,
            width: 640,
            height: 480,
        }
    }

    /// Observation of a ground-truth state with exact correspondences.
    fn observe(model: &RobotModel, gt: &RobotState, k: &Intrinsics) -> Observation {
        let poses = part_poses_in_camera(model, gt).unwrap();
        let mut parts = Vec::new();
        let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (part, pose) in model.parts().iter().zip(&poses) {
            let points3d = pose.transform_points(&part.points);
            let projected = project(&points3d, k);
            let mut points2d = Vec::new();
            let mut visible = Vec::new();
            for p in &projected {
                let vis = p.valid && k.contains(&p.uv);
                if vis {
                    lo = lo.inf(&p.uv);
                    hi = hi.sup(&p.uv);
                }
                points2d.push(p.uv);
                visible.push(vis);
            }
            parts.push(ObservedPart {
                points3d,
                points2d,
                visible,
            });
        }
        Observation {
            camera: *k,
            detection: BoundingBox {
                center: (lo + hi) / 2.0,
                size: hi - lo,
            },
            parts,
            measured_joints: Some(gt.q.clone()),
            ground_truth: Some(gt.clone()),
        }
    }

    /// Build a full PredictInput for a state against an observation.
    fn predict_input<'a>(
        model: &'a RobotModel,
        observation: &'a Observation,
        state: &'a RobotState,
        rendered: &'a crate::render::RenderOutput,
        crop_k: &'a Intrinsics,
        reference: Vector3<f64>,
        known_joints: bool,
    ) -> PredictInput<'a> {
        PredictInput {
            model,
            observation,
            state,
            render: rendered,
            crop_camera: crop_k,
            reference,
            known_joints,
        }
    }

    struct Scene3 {
        crop_k: Intrinsics,
        rendered: crate::render::RenderOutput,
        reference: Vector3<f64>,
    }

    fn stage(model: &RobotModel, state: &RobotState, k: &Intrinsics) -> Scene3 {
        let reference = crate::kinematics::robot_centroid(model, state).unwrap();
        let poses = part_poses_in_camera(model, state).unwrap();
        let mut projected = Vec::new();
        for (part, pose) in model.parts().iter().zip(&poses) {
            projected.extend(project(&pose.transform_points(&part.points), k));
        }
        let center = project(&[reference], k)[0].uv;
        let crop = compute_crop(&projected, center, CROP_ASPECT, CROP_ENLARGE).unwrap();
        let crop_k = crop_camera(k, &crop, 320, 240).unwrap();
        let rendered = render(model, state, k, &crop, 320, 240).unwrap();
        Scene3 {
            crop_k,
            rendered,
            reference,
        }
    }

    fn gt_state(model: &RobotModel, seed: u64) -> RobotState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = JointConfig(
            model
                .joints()
                .iter()
                .map(|j| rng.random_range(j.lower..j.upper))
                .collect(),
        );
        RobotState {
            anchor: 0,
            pose: RigidTransform::new(
                so3_exp(&Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )),
                Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(1.2..2.0),
                ),
            ),
            q,
        }
    }

    #[test]
    fn oracle_at_ground_truth_is_identity() {
        let model = panda_like();
        let k = vga();
        let gt = gt_state(&model, 61);
        let obs = observe(&model, &gt, &k);
        let staged = stage(&model, &gt, &k);
        let input = predict_input(&model, &obs, &gt, &staged.rendered, &staged.crop_k, staged.reference, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = OracleRefiner::exact().predict(&input, &mut rng).unwrap();
        assert!(p.update.v_x.abs() < 1e-9);
        assert!(p.update.v_y.abs() < 1e-9);
        assert_relative_eq!(p.update.v_z, 1.0, epsilon = 1e-12);
        assert!((p.update.delta_r - Matrix3::identity()).norm() < 1e-12);
        assert!(p.delta_q.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn oracle_full_step_reaches_ground_truth() {
        let model = panda_like();
        let k = vga();
        let gt = gt_state(&model, 62);
        let obs = observe(&model, &gt, &k);
        let mut state = gt_state(&model, 63);
        state.q = crate::kinematics::midrange_config(&model);

        let staged = stage(&model, &state, &k);
        let input = predict_input(&model, &obs, &state, &staged.rendered, &staged.crop_k, staged.reference, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = OracleRefiner::exact().predict(&input, &mut rng).unwrap();
        let pose = apply_pose_update(
            &state.pose,
            &p.update,
            &staged.reference,
            staged.crop_k.focals(),
        )
        .unwrap();
        assert!((pose.rotation - gt.pose.rotation).norm() < 1e-9);
        assert!((pose.translation - gt.pose.translation).norm() < 1e-9);
        for (i, d) in p.delta_q.iter().enumerate() {
            assert_relative_eq!(state.q.0[i] + d, gt.q.0[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn oracle_half_step_halves_joint_error() {
        let model = planar_arm();
        let k = vga();
        let gt = RobotState {
            anchor: 0,
            pose: RigidTransform::from_translation(Vector3::new(0.0, 0.0, 2.0)),
            q: JointConfig(vec![0.8, -0.6]),
        };
        let obs = observe(&model, &gt, &k);
        let refiner = OracleRefiner::new(OracleConfig {
            step_fraction: 0.5,
            ..OracleConfig::default()
        });
        let mut state = RobotState {
            anchor: 0,
            pose: gt.pose,
            q: JointConfig(vec![0.0, 0.0]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..6 {
            let staged = stage(&model, &state, &k);
            let input = predict_input(&model, &obs, &state, &staged.rendered, &staged.crop_k, staged.reference, false);
            let p = refiner.predict(&input, &mut rng).unwrap();
            for (v, d) in state.q.0.iter_mut().zip(&p.delta_q) {
                *v += d;
            }
        }
        // The joint error halves each iteration: after 6 halvings the
        // residual is 2^-6 of the initial error.
        assert_relative_eq!(state.q.0[0], 0.8 * (1.0 - 0.5f64.powi(6)), epsilon = 1e-12);
        assert_relative_eq!(state.q.0[1], -0.6 * (1.0 - 0.5f64.powi(6)), epsilon = 1e-12);
    }

    #[test]
    fn lsq_zero_residual_gives_identity() {
        let model = panda_like();
        let k = vga();
        let gt = gt_state(&model, 64);
        let obs = observe(&model, &gt, &k);
        let staged = stage(&model, &gt, &k);
        let input = predict_input(&model, &obs, &gt, &staged.rendered, &staged.crop_k, staged.reference, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LsqRefiner::default().predict(&input, &mut rng).unwrap();
        assert!(p.update.v_x.abs() < 1e-9);
        assert!(p.update.v_y.abs() < 1e-9);
        assert_relative_eq!(p.update.v_z, 1.0, epsilon = 1e-9);
        assert!((p.update.delta_r - Matrix3::identity()).norm() < 1e-9);
        assert!(p.delta_q.iter().all(|d| d.abs() < 1e-9));
    }

    /// Single-part, zero-joint model for the rigid alignment cases.
    fn rigid_model() -> RobotModel {
        let mut pts = Vec::new();
        for &x in &[-0.1, 0.1] {
            for &y in &[-0.1, 0.1] {
                for &z in &[-0.1, 0.1] {
                    pts.push(Vector3::new(x, y, z));
                }
            }
        }
        RobotModel::new(
            "rigid".into(),
            vec![PartSpec {
                id: 0,
                name: "body".into(),
                points: pts,
                volume_cm3: 8000.0,
            }],
            Vec::<JointSpec>::new(),
        )
        .unwrap()
    }

    #[test]
    fn lsq_recovers_image_plane_offset_in_one_step() {
        // Pure x/y offsets keep the residual affine in (v_x, v_y), so a
        // single Gauss-Newton step lands on the offset.
        let model = rigid_model();
        let k = vga();
        let gt = RobotState {
            anchor: 0,
            pose: RigidTransform::from_translation(Vector3::new(0.03, -0.02, 1.5)),
            q: JointConfig(vec![]),
        };
        let obs = observe(&model, &gt, &k);
        let mut state = gt.clone();
        state.pose.translation += Vector3::new(-0.05, 0.04, 0.0);

        let staged = stage(&model, &state, &k);
        let input = predict_input(&model, &obs, &state, &staged.rendered, &staged.crop_k, staged.reference, false);
        let refiner = LsqRefiner::new(LsqConfig {
            max_inner_iterations: 1,
            damping: 1e-12,
            ..LsqConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = refiner.predict(&input, &mut rng).unwrap();
        let pose = apply_pose_update(
            &state.pose,
            &p.update,
            &staged.reference,
            staged.crop_k.focals(),
        )
        .unwrap();
        assert!((pose.translation - gt.pose.translation).norm() < 1e-6);
    }

    #[test]
    fn lsq_recovers_general_translation_offset() {
        let model = rigid_model();
        let k = vga();
        let gt = RobotState {
            anchor: 0,
            pose: RigidTransform::from_translation(Vector3::new(0.0, 0.0, 1.5)),
            q: JointConfig(vec![]),
        };
        let obs = observe(&model, &gt, &k);
        let mut state = gt.clone();
        state.pose.translation += Vector3::new(-0.04, 0.03, 0.08);

        let staged = stage(&model, &state, &k);
        let input = predict_input(&model, &obs, &state, &staged.rendered, &staged.crop_k, staged.reference, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LsqRefiner::default().predict(&input, &mut rng).unwrap();
        let pose = apply_pose_update(
            &state.pose,
            &p.update,
            &staged.reference,
            staged.crop_k.focals(),
        )
        .unwrap();
        assert!((pose.translation - gt.pose.translation).norm() < 1e-6);
    }

    #[test]
    fn lsq_missing_correspondences_errors() {
        let model = panda_like();
        let k = vga();
        let gt = gt_state(&model, 65);
        let mut obs = observe(&model, &gt, &k);
        obs.parts.clear();
        let staged = stage(&model, &gt, &k);
        let input = predict_input(&model, &obs, &gt, &staged.rendered, &staged.crop_k, staged.reference, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            LsqRefiner::default().predict(&input, &mut rng),
            Err(RefinerError::MissingCorrespondences)
        ));
    }

    #[test]
    fn lsq_inner_costs_never_increase() {
        let model = panda_like();
        let k = vga();
        let gt = gt_state(&model, 66);
        let obs = observe(&model, &gt, &k);
        let mut state = gt.clone();
        state.pose.translation += Vector3::new(0.05, -0.04, 0.1);
        state.q.0.iter_mut().for_each(|v| *v += 0.1);
        model.clamp_joints(&mut state.q);

        let staged = stage(&model, &state, &k);
        let input = predict_input(&model, &obs, &state, &staged.rendered, &staged.crop_k, staged.reference, false);
        let problem = LsqProblem::new(&input, ResidualKind::Point3d).unwrap();
        let config = LsqConfig {
            max_inner_iterations: 8,
            ..LsqConfig::default()
        };
        let (_, costs) = gauss_newton(&problem, &config);
        assert!(costs.len() > 1, "expected at least one accepted step");
        for w in costs.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "cost increased: {:?}", w);
        }
    }

    #[test]
    fn lsq_jacobian_matches_forward_difference_oracle() {
        let model = panda_like();
        let k = vga();
        let gt = gt_state(&model, 67);
        let obs = observe(&model, &gt, &k);
        let mut state = gt.clone();
        state.pose.translation += Vector3::new(0.02, 0.01, -0.03);

        let staged = stage(&model, &state, &k);
        let input = predict_input(&model, &obs, &state, &staged.rendered, &staged.crop_k, staged.reference, false);
        let problem = LsqProblem::new(&input, ResidualKind::Point3d).unwrap();
        let theta = DVector::from_fn(problem.dim(), |i, _| 0.01 * (i as f64 - 3.0));
        let central = problem.jacobian_central(&theta, 1e-6);
        let forward = problem.jacobian_forward(&theta, 1e-7);
        for col in 0..problem.dim() {
            let c = central.column(col);
            let f = forward.column(col);
            let denom = c.norm().max(1e-9);
            assert!(
                (c - f).norm() / denom < 1e-5,
                "column {col} mismatch: {}",
                (central.column(col) - forward.column(col)).norm() / denom
            );
        }
    }

    #[test]
    fn lsq_reprojection_residual_aligns_in_plane() {
        let model = rigid_model();
        let k = vga();
        let gt = RobotState {
            anchor: 0,
            pose: RigidTransform::from_translation(Vector3::new(0.0, 0.0, 1.5)),
            q: JointConfig(vec![]),
        };
        let obs = observe(&model, &gt, &k);
        let mut state = gt.clone();
        state.pose.translation += Vector3::new(0.05, -0.03, 0.0);

        let staged = stage(&model, &state, &k);
        let input = predict_input(&model, &obs, &state, &staged.rendered, &staged.crop_k, staged.reference, false);
        let refiner = LsqRefiner::new(LsqConfig {
            residual: ResidualKind::Reprojection2d,
            max_inner_iterations: 6,
            ..LsqConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = refiner.predict(&input, &mut rng).unwrap();
        let pose = apply_pose_update(
            &state.pose,
            &p.update,
            &staged.reference,
            staged.crop_k.focals(),
        )
        .unwrap();
        // Reprojection alignment fixes the image-plane offset.
        let err = pose.translation - gt.pose.translation;
        assert!(err.x.abs() < 1e-4 && err.y.abs() < 1e-4, "err {err:?}");
    }
}
