//! Deterministic sparse rendering of a robot state.
//!
//! Every quantity the estimation math consumes is defined on part points, so
//! rendering splats each projected point as a filled disc into the crop
//! raster instead of rasterizing meshes. Pixels are owned by the nearest
//! splat; the anchor mask collects the pixels owned by the anchor part, and a
//! point counts as occluded when another part's splat sits in front of it at
//! its own pixel by more than a depth epsilon.

use nalgebra::{Vector2, Vector3};

use crate::camera::{crop_camera, project, CropBox, Intrinsics};
use crate::estimator::{Observation, RobotState};
use crate::kinematics::{ModelError, RobotModel};

/// Radius of a point splat in crop pixels.
pub const SPLAT_RADIUS_PX: f64 = 2.0;
/// A point is occluded when a nearer splat of another part beats it by more
/// than this depth margin, meters.
pub const OCCLUSION_DEPTH_EPS_M: f64 = 1e-3;

/// Binary raster at the crop resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    data: Vec<bool>,
}

impl Mask {
    fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    fn set(&mut self, x: u32, y: u32) {
        self.data[(y * self.width + x) as usize] = true;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&b| !b)
    }

    /// Binary PGM (P5) serialization, foreground 255 on black.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&b| if b { 255u8 } else { 0u8 }));
        out
    }
}

/// A part point projected into the crop raster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderedPoint {
    /// Crop-pixel coordinates; meaningless when `in_front` is false.
    pub uv: Vector2<f64>,
    pub depth: f64,
    /// In front of the camera (projectable).
    pub in_front: bool,
    /// Projectable, inside the raster, and not occluded by another part.
    pub visible: bool,
}

/// Projected part points plus the robot and anchor masks, all at the crop
/// resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    /// Indexed `[part][point]`, matching the model's part point order.
    pub part_points: Vec<Vec<RenderedPoint>>,
    /// Pixels covered by any splat.
    pub robot_mask: Mask,
    /// Pixels whose nearest splat belongs to the anchor part.
    pub anchor_mask: Mask,
}

/// Render the state into the crop window at `out_w x out_h`.
///
/// Deterministic: pixel ownership ties break towards the earlier part and
/// point index.
pub fn render(
    model: &RobotModel,
    state: &RobotState,
    k: &Intrinsics,
    crop: &CropBox,
    out_w: u32,
    out_h: u32,
) -> Result<RenderOutput, ModelError> {
    let crop_k = crop_camera(k, crop, out_w, out_h).expect("crop aspect fixed by construction");
    let poses = crate::estimator::part_poses_in_camera(model, state)?;

    let mut part_points: Vec<Vec<RenderedPoint>> = Vec::with_capacity(model.num_parts());
    for (part, pose) in model.parts().iter().zip(&poses) {
        let cam_points: Vec<Vector3<f64>> = pose.transform_points(&part.points);
        let projected = project(&cam_points, &crop_k);
        part_points.push(
            projected
                .iter()
                .map(|p| RenderedPoint {
                    uv: p.uv,
                    depth: p.depth,
                    in_front: p.valid,
                    visible: false,
                })
                .collect(),
        );
    }

    // Nearest-depth ownership per pixel.
    let mut depth = vec![f64::INFINITY; (out_w * out_h) as usize];
    let mut owner = vec![usize::MAX; (out_w * out_h) as usize];
    let r2 = SPLAT_RADIUS_PX * SPLAT_RADIUS_PX;
    for (part_id, points) in part_points.iter().enumerate() {
        for p in points.iter().filter(|p| p.in_front) {
            let x_lo = ((p.uv.x - SPLAT_RADIUS_PX).floor().max(0.0)) as i64;
            let x_hi = ((p.uv.x + SPLAT_RADIUS_PX).ceil().min(out_w as f64 - 1.0)) as i64;
            let y_lo = ((p.uv.y - SPLAT_RADIUS_PX).floor().max(0.0)) as i64;
            let y_hi = ((p.uv.y + SPLAT_RADIUS_PX).ceil().min(out_h as f64 - 1.0)) as i64;
            if x_hi < 0 || y_hi < 0 || x_lo >= out_w as i64 || y_lo >= out_h as i64 {
                continue;
            }
            for py in y_lo..=y_hi {
                for px in x_lo..=x_hi {
                    let dx = px as f64 + 0.5 - p.uv.x;
                    let dy = py as f64 + 0.5 - p.uv.y;
                    if dx * dx + dy * dy > r2 {
                        continue;
                    }
                    let idx = (py as u32 * out_w + px as u32) as usize;
                    if p.depth < depth[idx] {
                        depth[idx] = p.depth;
                        owner[idx] = part_id;
                    }
                }
            }
        }
    }

    let mut robot_mask = Mask::new(out_w, out_h);
    let mut anchor_mask = Mask::new(out_w, out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let idx = (y * out_w + x) as usize;
            if owner[idx] != usize::MAX {
                robot_mask.set(x, y);
                if owner[idx] == state.anchor {
                    anchor_mask.set(x, y);
                }
            }
        }
    }

    // Visibility: the pixel a point lands in must not be owned by a nearer
    // splat of another part.
    for (part_id, points) in part_points.iter_mut().enumerate() {
        for p in points.iter_mut() {
            if !p.in_front {
                continue;
            }
            let (px, py) = (p.uv.x.floor(), p.uv.y.floor());
            if px < 0.0 || py < 0.0 || px >= out_w as f64 || py >= out_h as f64 {
                continue;
            }
            let idx = (py as u32 * out_w + px as u32) as usize;
            p.visible =
                !(owner[idx] != part_id && depth[idx] < p.depth - OCCLUSION_DEPTH_EPS_M);
        }
    }

    Ok(RenderOutput {
        width: out_w,
        height: out_h,
        part_points,
        robot_mask,
        anchor_mask,
    })
}

fn state_color(index: usize, total: usize) -> String {
    // Red at the start of the trace, green at the end.
    let t = if total <= 1 {
        1.0
    } else {
        index as f64 / (total - 1) as f64
    };
    let r = (220.0 * (1.0 - t) + 30.0 * t).round() as u8;
    let g = (60.0 * (1.0 - t) + 180.0 * t).round() as u8;
    format!("#{r:02x}{g:02x}40")
}

/// Wireframe overlay of a state sequence over the detection box, as an SVG
/// document: one group per state with the joint skeleton and part point
/// scatter, colored by iteration.
pub fn render_overlay_svg(
    observation: &Observation,
    states: &[RobotState],
    model: &RobotModel,
) -> Result<String, ModelError> {
    let k = &observation.camera;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
        k.width, k.height, k.width, k.height
    ));
    svg.push_str("<rect x=\"0\" y=\"0\" width=\"100%\" height=\"100%\" fill=\"#111111\"/>\n");

    let det = &observation.detection;
    svg.push_str(&format!(
        "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#d4d4d4\" stroke-dasharray=\"6 4\"/>\n",
        det.center.x - det.size.x / 2.0,
        det.center.y - det.size.y / 2.0,
        det.size.x,
        det.size.y
    ));

    for (i, state) in states.iter().enumerate() {
        let color = state_color(i, states.len());
        let poses = crate::estimator::part_poses_in_camera(model, state)?;
        svg.push_str(&format!(
            "<g id=\"state-{i}\" stroke=\"{color}\" fill=\"{color}\">\n"
        ));
        // Skeleton: one segment per joint from parent origin to child origin.
        for joint in model.joints() {
            let a = project(&[poses[joint.parent].translation], k)[0];
            let b = project(&[poses[joint.child].translation], k)[0];
            if a.valid && b.valid {
                svg.push_str(&format!(
                    "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke-width=\"2\"/>\n",
                    a.uv.x, a.uv.y, b.uv.x, b.uv.y
                ));
            }
        }
        for (part, pose) in model.parts().iter().zip(&poses) {
            for p in project(&pose.transform_points(&part.points), k) {
                if p.valid {
                    svg.push_str(&format!(
                        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\"/>\n",
                        p.uv.x, p.uv.y
                    ));
                }
            }
        }
        svg.push_str("</g>\n");
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}
