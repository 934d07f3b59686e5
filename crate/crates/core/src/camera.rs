//! Pinhole projection and the crop strategy that focuses the refiner on the
//! robot.
//!
//! The crop is the smallest box of fixed aspect ratio [`CROP_ASPECT`],
//! centered on the projected robot centroid, that encloses all projected
//! robot points, enlarged by [`CROP_ENLARGE`]. Re-expressing the original
//! intrinsics for that window yields the *virtual cropped camera* whose focal
//! lengths the pose-update pixel offsets refer to.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Focals;

/// Crop aspect ratio, width over height.
pub const CROP_ASPECT: f64 = 4.0 / 3.0;
/// Crop enlargement factor over the tight enclosing box.
pub const CROP_ENLARGE: f64 = 1.4;
/// Smallest crop height in pixels; guards degenerate single-point crops.
pub const MIN_CROP_HEIGHT_PX: f64 = 32.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("no valid projected points to crop")]
    EmptyProjection,
    #[error("output aspect {got} does not match crop aspect {expected}")]
    AspectMismatch { got: f64, expected: f64 },
}

/// Pinhole intrinsics of a pixel grid `width x height`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub f_x: f64,
    pub f_y: f64,
    pub c_x: f64,
    pub c_y: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn focals(&self) -> Focals {
        Focals {
            x: self.f_x,
            y: self.f_y,
        }
    }

    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.x < self.width as f64 && uv.y >= 0.0 && uv.y < self.height as f64
    }
}

/// A camera-frame point projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub uv: Vector2<f64>,
    pub depth: f64,
    /// False when the point sits at or behind the camera plane; `uv` is
    /// meaningless then.
    pub valid: bool,
}

/// Project camera-frame points: `u = f * xy / z + c`. Points with `z <= 0`
/// are flagged invalid instead of failing so downstream crops degrade
/// gracefully.
pub fn project(points: &[Vector3<f64>], k: &Intrinsics) -> Vec<Projected> {
    points
        .iter()
        .map(|p| {
            if p.z > 0.0 {
                Projected {
                    uv: Vector2::new(k.f_x * p.x / p.z + k.c_x, k.f_y * p.y / p.z + k.c_y),
                    depth: p.z,
                    valid: true,
                }
            } else {
                Projected {
                    uv: Vector2::zeros(),
                    depth: p.z,
                    valid: false,
                }
            }
        })
        .collect()
}

/// Crop window in full-image pixel coordinates; `width = aspect * height`
/// exactly by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    /// Window center (the projected robot centroid).
    pub center_x: f64,
    pub center_y: f64,
    pub width: f64,
    pub height: f64,
}

impl CropBox {
    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.center_x, self.center_y)
    }

    pub fn min_corner(&self) -> Vector2<f64> {
        Vector2::new(
            self.center_x - self.width / 2.0,
            self.center_y - self.height / 2.0,
        )
    }

    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        (uv.x - self.center_x).abs() <= self.width / 2.0
            && (uv.y - self.center_y).abs() <= self.height / 2.0
    }
}

/// Smallest aspect-ratio box centered on `center` enclosing the valid
/// projected points, enlarged by `enlarge`.
///
/// With extents `u_dist = max |corner - center|` per axis, the half sizes are
/// `max(u_dist_x, ratio * u_dist_y) * enlarge` horizontally and that divided
/// by `ratio` vertically, so containment and the exact ratio hold for every
/// point shape. The height is floored at [`MIN_CROP_HEIGHT_PX`].
pub fn compute_crop(
    projected: &[Projected],
    center: Vector2<f64>,
    ratio: f64,
    enlarge: f64,
) -> Result<CropBox, CameraError> {
    let mut u_dist = Vector2::new(0.0f64, 0.0f64);
    let mut any = false;
    for p in projected.iter().filter(|p| p.valid) {
        any = true;
        u_dist.x = u_dist.x.max((p.uv.x - center.x).abs());
        u_dist.y = u_dist.y.max((p.uv.y - center.y).abs());
    }
    if !any {
        return Err(CameraError::EmptyProjection);
    }
    let height = (2.0 * enlarge * (u_dist.x / ratio).max(u_dist.y)).max(MIN_CROP_HEIGHT_PX);
    Ok(CropBox {
        center_x: center.x,
        center_y: center.y,
        width: ratio * height,
        height,
    })
}

/// Intrinsics of the virtual camera observing only the crop window at
/// resolution `out_w x out_h`.
///
/// Focal lengths scale by the resampling factor and the principal point is
/// remapped so the crop center lands at the output center.
pub fn crop_camera(
    k: &Intrinsics,
    crop: &CropBox,
    out_w: u32,
    out_h: u32,
) -> Result<Intrinsics, CameraError> {
    let got = out_w as f64 / out_h as f64;
    let expected = crop.width / crop.height;
    if (got - expected).abs() > 1e-9 {
        return Err(CameraError::AspectMismatch { got, expected });
    }
    let sx = out_w as f64 / crop.width;
    let sy = out_h as f64 / crop.height;
    let min = crop.min_corner();
    Ok(Intrinsics {
        f_x: k.f_x * sx,
        f_y: k.f_y * sy,
        c_x: (k.c_x - min.x) * sx,
        c_y: (k.c_y - min.y) * sy,
        width: out_w,
        height: out_h,
    })
}

/// Map a full-image pixel into crop-output pixel coordinates.
pub fn remap_to_crop(uv: &Vector2<f64>, crop: &CropBox, out_w: u32, out_h: u32) -> Vector2<f64> {
    let min = crop.min_corner();
    Vector2::new(
        (uv.x - min.x) * out_w as f64 / crop.width,
        (uv.y - min.y) * out_h as f64 / crop.height,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    #[test]
    fn project_optical_axis() {
        let out = project(&[Vector3::new(0.0, 0.0, 1.0)], &vga());
        assert!(out[0].valid);
        assert_eq!(out[0].uv, Vector2::new(320.0, 240.0));
        assert_eq!(out[0].depth, 1.0);
    }

    #[test]
    fn project_by_hand() {
        let out = project(&[Vector3::new(1.0, 0.0, 2.0)], &vga());
        assert_relative_eq!(out[0].uv.x, 570.0, epsilon = 1e-12);
        assert_relative_eq!(out[0].uv.y, 240.0, epsilon = 1e-12);
    }

    #[test]
    fn project_behind_camera_flagged() {
        let out = project(&[Vector3::new(0.0, 0.0, -1.0)], &vga());
        assert!(!out[0].valid);
    }

    fn proj(uv: (f64, f64)) -> Projected {
        Projected {
            uv: Vector2::new(uv.0, uv.1),
            depth: 1.0,
            valid: true,
        }
    }

    #[test]
    fn crop_example_by_hand() {
        // Bounding corners (60,80)-(150,110) around center (100,100):
        // u_dist = (50, 20), so the crop is 140 x 105.
        let pts = [proj((60.0, 80.0)), proj((150.0, 110.0))];
        let crop = compute_crop(&pts, Vector2::new(100.0, 100.0), CROP_ASPECT, CROP_ENLARGE)
            .unwrap();
        assert_relative_eq!(crop.width, 140.0, epsilon = 1e-12);
        assert_relative_eq!(crop.height, 105.0, epsilon = 1e-12);
        assert_eq!(crop.center(), Vector2::new(100.0, 100.0));
    }

    #[test]
    fn crop_single_point_hits_floor() {
        let pts = [proj((100.0, 100.0))];
        let crop = compute_crop(&pts, Vector2::new(100.0, 100.0), CROP_ASPECT, CROP_ENLARGE)
            .unwrap();
        assert_eq!(crop.height, MIN_CROP_HEIGHT_PX);
        assert_eq!(crop.width, CROP_ASPECT * MIN_CROP_HEIGHT_PX);
    }

    #[test]
    fn crop_square_extent() {
        // Extent 2a x 2a: the vertical extent dominates, giving height
        // 2*lambda*a and width ratio times that.
        let a = 60.0;
        let pts = [proj((100.0 - a, 100.0 - a)), proj((100.0 + a, 100.0 + a))];
        let crop = compute_crop(&pts, Vector2::new(100.0, 100.0), CROP_ASPECT, CROP_ENLARGE)
            .unwrap();
        assert_relative_eq!(crop.height, 2.0 * CROP_ENLARGE * a, epsilon = 1e-12);
        assert_relative_eq!(crop.width, CROP_ASPECT * crop.height, epsilon = 1e-12);
    }

    #[test]
    fn crop_empty_projection_errors() {
        let pts = [Projected {
            uv: Vector2::zeros(),
            depth: -1.0,
            valid: false,
        }];
        assert_eq!(
            compute_crop(&pts, Vector2::zeros(), CROP_ASPECT, CROP_ENLARGE),
            Err(CameraError::EmptyProjection)
        );
    }

    #[test]
    fn crop_ratio_exact_and_contains() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..1000 {
            let n = rng.random_range(2..40);
            let pts: Vec<Projected> = (0..n)
                .map(|_| proj((rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))))
                .collect();
            // Center anywhere inside the projected bounding box.
            let (mut lo, mut hi) = (pts[0].uv, pts[0].uv);
            for p in &pts {
                lo = lo.inf(&p.uv);
                hi = hi.sup(&p.uv);
            }
            let center = Vector2::new(
                rng.random_range(lo.x..=hi.x.max(lo.x + 1e-9)),
                rng.random_range(lo.y..=hi.y.max(lo.y + 1e-9)),
            );
            let crop = compute_crop(&pts, center, CROP_ASPECT, CROP_ENLARGE).unwrap();
            assert_eq!(crop.width, CROP_ASPECT * crop.height);
            for p in &pts {
                assert!(crop.contains(&p.uv));
            }
        }
    }

    #[test]
    fn crop_camera_identity_window() {
        let k = vga();
        let crop = CropBox {
            center_x: 320.0,
            center_y: 240.0,
            width: 640.0,
            height: 480.0,
        };
        let kc = crop_camera(&k, &crop, 640, 480).unwrap();
        assert_eq!(kc, k);
    }

    #[test]
    fn crop_camera_half_width_doubles_focal() {
        let k = vga();
        let crop = CropBox {
            center_x: 320.0,
            center_y: 240.0,
            width: 320.0,
            height: 240.0,
        };
        let kc = crop_camera(&k, &crop, 640, 480).unwrap();
        assert_relative_eq!(kc.f_x, 2.0 * k.f_x, epsilon = 1e-12);
        assert_relative_eq!(kc.f_y, 2.0 * k.f_y, epsilon = 1e-12);
    }

    #[test]
    fn crop_camera_centers_crop_center() {
        let k = vga();
        let crop = CropBox {
            center_x: 410.0,
            center_y: 130.0,
            width: 200.0,
            height: 150.0,
        };
        let out = remap_to_crop(&crop.center(), &crop, 320, 240);
        assert_relative_eq!(out.x, 160.0, epsilon = 1e-12);
        assert_relative_eq!(out.y, 120.0, epsilon = 1e-12);
        assert!(crop_camera(&k, &crop, 320, 240).is_ok());
        assert!(matches!(
            crop_camera(&k, &crop, 320, 200),
            Err(CameraError::AspectMismatch { .. })
        ));
    }

    #[test]
    fn projection_consistency_through_crop() {
        let k = vga();
        let crop = CropBox {
            center_x: 410.0,
            center_y: 130.0,
            width: 200.0,
            height: 150.0,
        };
        let kc = crop_camera(&k, &crop, 320, 240).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..500 {
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.2..5.0),
            );
            let full = project(&[p], &k)[0].uv;
            let direct = project(&[p], &kc)[0].uv;
            let remapped = remap_to_crop(&full, &crop, 320, 240);
            assert!((direct - remapped).norm() < 1e-9);
        }
    }
}
