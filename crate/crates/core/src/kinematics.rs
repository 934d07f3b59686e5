//! Kinematic tree of a robot: rigid parts connected by revolute joints.
//!
//! A [`RobotModel`] is immutable after loading and validated on construction:
//! part 0 is the root, every other part has exactly one parent joint, and the
//! joints form a connected tree. Part shapes are point clouds in the part
//! frame; they are the canonical geometry for rendering, losses and metrics.
//!
//! Robot descriptions are single JSON documents:
//!
//! ```json
//! {
//!   "name": "arm",
//!   "parts": [
//!     { "name": "base", "points": [[x, y, z], ...], "volume_cm3": 2660.0 }
//!   ],
//!   "joints": [
//!     { "parent": 0, "child": 1,
//!       "origin": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]],
//!       "axis": [0, 0, 1], "limits": [-2.8, 2.8] }
//!   ]
//! }
//! ```
//!
//! `origin` is a 4x4 row-major homogeneous matrix mapping the joint frame to
//! the parent part frame; `points` are meters; `limits` are radians. Part ids
//! are implicit array indices. When `volume_cm3` is absent the volume of the
//! axis-aligned bounding box of the point cloud is used.

use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;
use thiserror::Error;

use crate::estimator::{part_poses_in_camera, RobotState};
use crate::geometry::{orthonormalize, so3_exp, RigidTransform};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("part {part} ({name}): {reason}")]
    InvalidPart {
        part: usize,
        name: String,
        reason: String,
    },
    #[error("joint {joint}: {reason}")]
    InvalidJoint { joint: usize, reason: String },
    #[error("joint {joint} references missing part {part}")]
    DanglingPart { joint: usize, part: usize },
    #[error("cycle detected: {reason}")]
    CycleDetected { reason: String },
    #[error("model needs at least one part")]
    NoParts,
    #[error("joint config has {got} values but the model has {expected} joints")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("part id {0} out of range")]
    InvalidPartId(usize),
    #[error("count {n} out of range 1..={max}")]
    CountOutOfRange { n: usize, max: usize },
}

/// One rigid part of the robot.
#[derive(Debug, Clone)]
pub struct PartSpec {
    /// Index of the part; equals its position in [`RobotModel::parts`].
    pub id: usize,
    pub name: String,
    /// Shape sample points in the part frame, meters. Never empty.
    pub points: Vec<Vector3<f64>>,
    /// Part volume in cubic centimeters, used to rank parts by size.
    pub volume_cm3: f64,
}

/// A revolute joint connecting a parent part to a child part.
#[derive(Debug, Clone)]
pub struct JointSpec {
    pub parent: usize,
    pub child: usize,
    /// Joint frame expressed in the parent part frame.
    pub origin: RigidTransform,
    /// Unit rotation axis in the joint frame.
    pub axis: Vector3<f64>,
    /// Lower angle limit, radians.
    pub lower: f64,
    /// Upper angle limit, radians.
    pub upper: f64,
}

/// Joint angles, one per joint in model order (radians).
#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig(pub Vec<f64>);

impl JointConfig {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Immutable kinematic tree rooted at part 0.
#[derive(Debug, Clone)]
pub struct RobotModel {
    name: String,
    parts: Vec<PartSpec>,
    joints: Vec<JointSpec>,
    /// Joint indices ordered so every joint's parent part precedes its child.
    topo: Vec<usize>,
}

#[derive(Deserialize)]
struct PartDoc {
    name: String,
    points: Vec<[f64; 3]>,
    #[serde(default)]
    volume_cm3: Option<f64>,
}

#[derive(Deserialize)]
struct JointDoc {
    parent: usize,
    child: usize,
    origin: [[f64; 4]; 4],
    axis: [f64; 3],
    limits: [f64; 2],
}

#[derive(Deserialize)]
struct RobotDoc {
    #[serde(default)]
    name: String,
    parts: Vec<PartDoc>,
    joints: Vec<JointDoc>,
}

/// Parse and validate a robot description document.
pub fn load_robot(json: &str) -> Result<RobotModel, ModelError> {
    let doc: RobotDoc = serde_json::from_str(json)?;

    let mut parts = Vec::with_capacity(doc.parts.len());
    for (id, p) in doc.parts.into_iter().enumerate() {
        if p.points.is_empty() {
            return Err(ModelError::InvalidPart {
                part: id,
                name: p.name,
                reason: "empty point cloud".into(),
            });
        }
        let points: Vec<Vector3<f64>> = p.points.iter().map(|&[x, y, z]| Vector3::new(x, y, z)).collect();
        let volume_cm3 = match p.volume_cm3 {
            Some(v) => v,
            None => bounding_box_volume_cm3(&points),
        };
        if !volume_cm3.is_finite() || volume_cm3 <= 0.0 {
            return Err(ModelError::InvalidPart {
                part: id,
                name: p.name,
                reason: format!("volume must be positive, got {volume_cm3}"),
            });
        }
        parts.push(PartSpec {
            id,
            name: p.name,
            points,
            volume_cm3,
        });
    }

    let mut joints = Vec::with_capacity(doc.joints.len());
    for (j, jd) in doc.joints.into_iter().enumerate() {
        let bottom = jd.origin[3];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(ModelError::InvalidJoint {
                joint: j,
                reason: format!("origin bottom row must be [0,0,0,1], got {bottom:?}"),
            });
        }
        let rot = Matrix3::from_rows(&[
            [jd.origin[0][0], jd.origin[0][1], jd.origin[0][2]].into(),
            [jd.origin[1][0], jd.origin[1][1], jd.origin[1][2]].into(),
            [jd.origin[2][0], jd.origin[2][1], jd.origin[2][2]].into(),
        ]);
        let origin = RigidTransform::new(
            orthonormalize(&rot),
            Vector3::new(jd.origin[0][3], jd.origin[1][3], jd.origin[2][3]),
        );
        if RigidTransform::new(rot, Vector3::zeros()).rotation_defect() > 1e-6 {
            return Err(ModelError::InvalidJoint {
                joint: j,
                reason: "origin rotation block is not a rotation matrix".into(),
            });
        }
        let axis = Vector3::new(jd.axis[0], jd.axis[1], jd.axis[2]);
        if (axis.norm() - 1.0).abs() > 1e-6 {
            return Err(ModelError::InvalidJoint {
                joint: j,
                reason: format!("axis must have unit norm, got {}", axis.norm()),
            });
        }
        if !jd.limits.iter().all(|v| v.is_finite()) || jd.limits[0] >= jd.limits[1] {
            return Err(ModelError::InvalidJoint {
                joint: j,
                reason: format!("limits must satisfy lower < upper, got {:?}", jd.limits),
            });
        }
        joints.push(JointSpec {
            parent: jd.parent,
            child: jd.child,
            origin,
            axis: axis / axis.norm(),
            lower: jd.limits[0],
            upper: jd.limits[1],
        });
    }

    RobotModel::new(doc.name, parts, joints)
}

fn bounding_box_volume_cm3(points: &[Vector3<f64>]) -> f64 {
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let d = hi - lo;
    d.x * d.y * d.z * 1e6
}

impl RobotModel {
    /// Validate parts and joints and build the traversal order.
    pub fn new(
        name: String,
        parts: Vec<PartSpec>,
        joints: Vec<JointSpec>,
    ) -> Result<Self, ModelError> {
        if parts.is_empty() {
            return Err(ModelError::NoParts);
        }
        let n = parts.len();
        let mut parent_joint: Vec<Option<usize>> = vec![None; n];
        for (j, joint) in joints.iter().enumerate() {
            for part in [joint.parent, joint.child] {
                if part >= n {
                    return Err(ModelError::DanglingPart { joint: j, part });
                }
            }
            if joint.child == joint.parent {
                return Err(ModelError::CycleDetected {
                    reason: format!("joint {j} connects part {} to itself", joint.child),
                });
            }
            if joint.child == 0 {
                return Err(ModelError::CycleDetected {
                    reason: format!("joint {j} makes the root a child"),
                });
            }
            if let Some(prev) = parent_joint[joint.child] {
                return Err(ModelError::InvalidJoint {
                    joint: j,
                    reason: format!(
                        "part {} already has parent joint {prev}; each part needs exactly one",
                        joint.child
                    ),
                });
            }
            parent_joint[joint.child] = Some(j);
        }
        for (part, pj) in parent_joint.iter().enumerate().skip(1) {
            if pj.is_none() {
                return Err(ModelError::InvalidPart {
                    part,
                    name: parts[part].name.clone(),
                    reason: "no parent joint; part is unreachable from the root".into(),
                });
            }
        }

        // Walk from the root; with single-parent already enforced, anything
        // left unreached must sit on a cycle.
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (j, joint) in joints.iter().enumerate() {
            children[joint.parent].push(j);
        }
        let mut topo = Vec::with_capacity(joints.len());
        let mut stack = vec![0usize];
        let mut reached = vec![false; n];
        reached[0] = true;
        while let Some(part) = stack.pop() {
            for &j in &children[part] {
                topo.push(j);
                reached[joints[j].child] = true;
                stack.push(joints[j].child);
            }
        }
        if let Some(part) = reached.iter().position(|r| !r) {
            return Err(ModelError::CycleDetected {
                reason: format!("part {part} is not reachable from the root"),
            });
        }

        Ok(Self {
            name,
            parts,
            joints,
            topo,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn parts(&self) -> &[PartSpec] {
        &self.parts
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    /// Number of joints D.
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn check_part_id(&self, id: usize) -> Result<(), ModelError> {
        if id < self.parts.len() {
            Ok(())
        } else {
            Err(ModelError::InvalidPartId(id))
        }
    }

    /// Total number of shape points over all parts.
    pub fn total_points(&self) -> usize {
        self.parts.iter().map(|p| p.points.len()).sum()
    }

    /// Joint range of motion per joint, radians.
    pub fn joint_ranges(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.upper - j.lower).collect()
    }

    /// Clamp a joint vector to the limits, in place.
    pub fn clamp_joints(&self, q: &mut JointConfig) {
        for (v, j) in q.0.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.lower, j.upper);
        }
    }
}

/// Pose of every part in the root frame for joint angles `q`.
///
/// The root pose is the identity; each child pose is
/// `parent ∘ origin ∘ rot(axis, q_i)`.
pub fn forward_kinematics(
    model: &RobotModel,
    q: &JointConfig,
) -> Result<Vec<RigidTransform>, ModelError> {
    if q.len() != model.dof() {
        return Err(ModelError::DimensionMismatch {
            got: q.len(),
            expected: model.dof(),
        });
    }
    let mut poses = vec![RigidTransform::identity(); model.num_parts()];
    for &j in &model.topo {
        let joint = &model.joints[j];
        let spin = RigidTransform::new(so3_exp(&(joint.axis * q.0[j])), Vector3::zeros());
        poses[joint.child] = poses[joint.parent].compose(&joint.origin).compose(&spin);
    }
    Ok(poses)
}

/// Transform taking coordinates of part `b`'s frame into part `a`'s frame:
/// `fk(a)⁻¹ ∘ fk(b)`.
pub fn relative_part_transform(
    model: &RobotModel,
    q: &JointConfig,
    a: usize,
    b: usize,
) -> Result<RigidTransform, ModelError> {
    model.check_part_id(a)?;
    model.check_part_id(b)?;
    let poses = forward_kinematics(model, q)?;
    Ok(poses[a].invert().compose(&poses[b]))
}

/// Joint vector at the middle of the limits: `q_i = (lower_i + upper_i) / 2`.
pub fn midrange_config(model: &RobotModel) -> JointConfig {
    JointConfig(
        model
            .joints()
            .iter()
            .map(|j| (j.lower + j.upper) / 2.0)
            .collect(),
    )
}

/// The `n` part ids with the largest volume, descending; ties break by
/// ascending id so the ordering is reproducible.
pub fn largest_parts(model: &RobotModel, n: usize) -> Result<Vec<usize>, ModelError> {
    if n == 0 || n > model.num_parts() {
        return Err(ModelError::CountOutOfRange {
            n,
            max: model.num_parts(),
        });
    }
    let mut ids: Vec<usize> = (0..model.num_parts()).collect();
    ids.sort_by(|&a, &b| {
        model.parts[b]
            .volume_cm3
            .total_cmp(&model.parts[a].volume_cm3)
            .then(a.cmp(&b))
    });
    ids.truncate(n);
    Ok(ids)
}

/// Centroid of all part points in the camera frame: the unweighted mean over
/// every shape point of every part, placed by the state.
pub fn robot_centroid(model: &RobotModel, state: &RobotState) -> Result<Vector3<f64>, ModelError> {
    let poses = part_poses_in_camera(model, state)?;
    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    for (part, pose) in model.parts().iter().zip(&poses) {
        for p in &part.points {
            sum += pose.transform_point(p);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
pub(crate) mod test_models {
    use super::*;

    fn box_points(hx: f64, hy: f64, hz: f64) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for &x in &[-hx, hx] {
            for &y in &[-hy, hy] {
                for &z in &[-hz, hz] {
                    pts.push(Vector3::new(x, y, z));
                }
            }
        }
        pts
    }

    /// Two-link planar arm: unit links along +x, joints about +z.
    pub fn planar_arm() -> RobotModel {
        let parts = vec![
            PartSpec {
                id: 0,
                name: "base".into(),
                points: box_points(0.05, 0.05, 0.05),
                volume_cm3: 1000.0,
            },
            PartSpec {
                id: 1,
                name: "link1".into(),
                points: box_points(0.5, 0.04, 0.04),
                volume_cm3: 800.0,
            },
            PartSpec {
                id: 2,
                name: "link2".into(),
                points: box_points(0.5, 0.04, 0.04),
                volume_cm3: 600.0,
            },
        ];
        let z = Vector3::new(0.0, 0.0, 1.0);
        let joints = vec![
            JointSpec {
                parent: 0,
                child: 1,
                origin: RigidTransform::identity(),
                axis: z,
                lower: -std::f64::consts::PI,
                upper: std::f64::consts::PI,
            },
            JointSpec {
                parent: 1,
                child: 2,
                origin: RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0)),
                axis: z,
                lower: -std::f64::consts::PI,
                upper: std::f64::consts::PI,
            },
        ];
        RobotModel::new("planar_arm".into(), parts, joints).unwrap()
    }

    pub fn panda_like() -> RobotModel {
        load_robot(include_str!("../../../assets/panda_like.json")).unwrap()
    }
}
