//! Near-telecentric microscope model: scaled orthographic projection with a
//! small optical-axis tilt and single-coefficient radial distortion.
//!
//! A world point `P` is rotated into the camera frame, its lateral
//! coordinates are scaled to pixels, then distorted about the principal
//! point:
//!
//! ```text
//! c  = R_tilt * P
//! d  = (c.x, c.y) / um_per_px
//! d' = d * (1 + k1 * |d|^2 / r0^2)
//! px = principal_point + d'
//! ```

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units;

/// Largest |k1| for which the distortion stays injective well beyond the
/// frame corners.
pub const DISTORTION_SAFE_BOUND: f64 = 0.1;
/// Largest accepted tilt per axis.
pub const MAX_TILT_RAD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    /// Rotation about world X then Y, radians.
    pub tilt_rad: [f64; 2],
    pub um_per_px: f64,
    pub k1: f64,
    pub principal_point: [f64; 2],
    /// Normalising radius for the distortion term, pixels.
    pub distortion_radius_px: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            tilt_rad: [0.0, 0.0],
            um_per_px: units::MICROSCOPE_UM_PER_PX,
            k1: 0.0,
            principal_point: [
                units::MICROSCOPE_WIDTH as f64 / 2.0,
                units::MICROSCOPE_HEIGHT as f64 / 2.0,
            ],
            distortion_radius_px: units::MICROSCOPE_WIDTH as f64 / 2.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.um_per_px > 0.0) {
            return Err(Error::InvalidConfig("camera um_per_px must be positive".into()));
        }
        if !(self.distortion_radius_px > 0.0) {
            return Err(Error::InvalidConfig(
                "camera distortion_radius_px must be positive".into(),
            ));
        }
        if self.k1.abs() > DISTORTION_SAFE_BOUND + 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "camera k1 = {} exceeds the safe bound {DISTORTION_SAFE_BOUND}",
                self.k1
            )));
        }
        if self.tilt_rad.iter().any(|t| t.abs() > MAX_TILT_RAD) {
            return Err(Error::InvalidConfig(format!(
                "camera tilt must be within +/-{MAX_TILT_RAD} rad"
            )));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), self.tilt_rad[0]);
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), self.tilt_rad[1]);
        (rx * ry).into_inner()
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        Vector2::from(self.principal_point)
    }

    /// Apply radial distortion to an undistorted pixel offset.
    pub fn distort(&self, d: &Vector2<f64>) -> Vector2<f64> {
        let r2 = d.norm_squared() / (self.distortion_radius_px * self.distortion_radius_px);
        d * (1.0 + self.k1 * r2)
    }

    /// Invert [`distort`](Self::distort) by Newton iteration on the radius.
    pub fn undistort(&self, dd: &Vector2<f64>) -> Vector2<f64> {
        let rho_d = dd.norm();
        if self.k1 == 0.0 || rho_d == 0.0 {
            return *dd;
        }
        let r0sq = self.distortion_radius_px * self.distortion_radius_px;
        let mut rho = rho_d;
        for _ in 0..50 {
            let g = rho * (1.0 + self.k1 * rho * rho / r0sq) - rho_d;
            let dg = 1.0 + 3.0 * self.k1 * rho * rho / r0sq;
            let step = g / dg;
            rho -= step;
            if step.abs() < 1e-13 * rho_d.max(1.0) {
                break;
            }
        }
        dd * (rho / rho_d)
    }

    /// Pixel position of world point `p`.
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let c = self.rotation() * p;
        let d = Vector2::new(c.x, c.y) / self.um_per_px;
        self.principal_point() + self.distort(&d)
    }

    /// Ray of world points that image at `px`: `origin + s * direction`.
    /// `direction` is the optical axis reversed (pointing up, +Z-ish).
    pub fn ray(&self, px: &Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let d = self.undistort(&(px - self.principal_point()));
        let c = d * self.um_per_px;
        let rt = self.rotation().transpose();
        (rt * Vector3::new(c.x, c.y, 0.0), rt * Vector3::z())
    }

    /// Intersect the ray of `px` with a height field `z = f(xy)` whose
    /// gradient is `grad`.
    pub fn intersect_height_field<F, G>(&self, px: &Vector2<f64>, f: F, grad: G) -> Vector3<f64>
    where
        F: Fn(&Vector2<f64>) -> f64,
        G: Fn(&Vector2<f64>) -> Vector2<f64>,
    {
        let (o, w) = self.ray(px);
        let mut s = (f(&o.xy()) - o.z) / w.z;
        for _ in 0..20 {
            let p = o + w * s;
            let g = p.z - f(&p.xy());
            let dg = w.z - grad(&p.xy()).dot(&w.xy());
            let step = g / dg;
            s -= step;
            if step.abs() < 1e-10 {
                break;
            }
        }
        o + w * s
    }

    pub fn in_frame(px: &Vector2<f64>) -> bool {
        px.x >= 0.0
            && px.y >= 0.0
            && px.x < units::MICROSCOPE_WIDTH as f64
            && px.y < units::MICROSCOPE_HEIGHT as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn centred_projection() {
        let cam = CameraModel::default();
        for z in [-100.0, 0.0, 1234.0] {
            let px = cam.project(&Vector3::new(0.0, 0.0, z));
            assert!((px - Vector2::new(320.0, 240.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn pure_translation_scales() {
        let cam = CameraModel::default();
        let a = cam.project(&Vector3::new(500.0, -300.0, 50.0));
        let b = cam.project(&Vector3::new(636.0, -300.0, 50.0));
        assert!(((b - a) - Vector2::new(10.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn distortion_matches_direct_formula() {
        let cam = CameraModel {
            k1: 0.08,
            ..Default::default()
        };
        let mut rng = substream(5, "cam", 0);
        for _ in 0..20 {
            let p = Vector3::new(
                rng.random_range(-4000.0..4000.0),
                rng.random_range(-3000.0..3000.0),
                rng.random_range(-200.0..1500.0),
            );
            let u = p.x / 13.6;
            let v = p.y / 13.6;
            let r2 = (u * u + v * v) / (320.0 * 320.0);
            let expected = Vector2::new(320.0 + u * (1.0 + 0.08 * r2), 240.0 + v * (1.0 + 0.08 * r2));
            assert!((cam.project(&p) - expected).norm() < 1e-9);
        }
    }

    #[test]
    fn undistort_inverts_distort() {
        for k1 in [-0.1, -0.03, 0.0, 0.05, 0.1] {
            let cam = CameraModel {
                k1,
                ..Default::default()
            };
            for d in [Vector2::new(300.0, 220.0), Vector2::new(-5.0, 1.0), Vector2::new(0.0, -400.0)] {
                let back = cam.undistort(&cam.distort(&d));
                assert!((back - d).norm() < 1e-9, "k1 {k1}: {back} vs {d}");
            }
        }
    }

    #[test]
    fn ray_projects_back_to_pixel() {
        let cam = CameraModel {
            tilt_rad: [0.02, -0.015],
            k1: -0.05,
            ..Default::default()
        };
        let px = Vector2::new(100.0, 400.0);
        let (o, w) = cam.ray(&px);
        for s in [-500.0, 0.0, 2000.0] {
            assert!((cam.project(&(o + w * s)) - px).norm() < 1e-9);
        }
    }

    #[test]
    fn height_field_intersection() {
        let cam = CameraModel {
            tilt_rad: [0.03, 0.01],
            ..Default::default()
        };
        let f = |xy: &Vector2<f64>| 20.0 * (xy.x / 500.0).sin() + 0.01 * xy.y;
        let g = |xy: &Vector2<f64>| Vector2::new(20.0 / 500.0 * (xy.x / 500.0).cos(), 0.01);
        let px = Vector2::new(410.0, 133.0);
        let p = cam.intersect_height_field(&px, f, g);
        assert!((p.z - f(&p.xy())).abs() < 1e-8);
        assert!((cam.project(&p) - px).norm() < 1e-9);
    }

    #[test]
    fn validation_bounds() {
        assert!(CameraModel::default().validate().is_ok());
        assert!(CameraModel {
            k1: 0.2,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(CameraModel {
            tilt_rad: [0.0, 0.5],
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn radial_map_is_monotone_within_safe_bound() {
        // Injectivity: radius after distortion must grow with radius.
        for k1 in [-DISTORTION_SAFE_BOUND, DISTORTION_SAFE_BOUND] {
            let cam = CameraModel {
                k1,
                ..Default::default()
            };
            let mut last = -1.0;
            for i in 0..=1000 {
                let r = i as f64 * 0.56;
                let rd = cam.distort(&Vector2::new(r, 0.0)).x;
                assert!(rd > last);
                last = rd;
            }
        }
    }
}
