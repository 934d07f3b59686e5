//! State estimation for articulated robots from single-camera observations.
//!
//! The library models a robot as a kinematic tree of rigid parts connected by
//! revolute joints and estimates its full state — the 6D pose of an *anchor*
//! part with respect to the camera plus all joint angles — by iteratively
//! rendering the current estimate, comparing it against the observation, and
//! applying a predicted correction.
//!
//! The main pieces are:
//!
//! - [`kinematics`] — robot description loading and forward kinematics.
//! - [`geometry`] — rigid-transform algebra and the reference-point
//!   parametrized pose update used by all refiners.
//! - [`camera`] — pinhole projection, crop-box computation and the virtual
//!   cropped-camera intrinsics.
//! - [`render`] — deterministic sparse point-splat rendering (masks and
//!   projected part points) plus SVG overlays for inspection.
//! - [`estimator`] — the iterative refinement engine: initialization, anchor
//!   selection and re-anchoring, and the state-update loop.
//! - [`refiners`] — concrete update predictors behind the [`estimator::Refiner`]
//!   interface: an exact oracle, a noise-injected oracle and a damped
//!   Gauss-Newton least-squares aligner.
//! - [`metrics`] — the disentangled pose loss and the evaluation metric suite
//!   (ADD / ADD-AUC, PCK, translation/rotation/joint error breakdowns).
//! - [`scene`] — synthetic scene sampling, state perturbation and the JSON
//!   Lines dataset schema used by the CLI.

pub mod camera;
pub mod estimator;
pub mod geometry;
pub mod kinematics;
pub mod metrics;
pub mod refiners;
pub mod render;
pub mod scene;
