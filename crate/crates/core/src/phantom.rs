//! Simulated surgical scene: retina height fields, scleral pivot and tool.
//!
//! World frame is the robot spatial frame, Z up, all lengths in micrometres.
//! The inner limiting membrane (ILM) is a smooth height field
//!
//! ```text
//! f_ILM(x, y) = base + sx*x + sy*y + (x^2 + y^2) / (2 Rc) + sum_i a_i exp(-|xy - c_i|^2 / (2 s_i^2))
//! ```
//!
//! and the RPE sits a constant retinal thickness below it.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAX_BUMPS: usize = 8;

/// Tool tip position and shaft direction.
///
/// `axis` is a unit vector pointing from the tip up the shaft, towards the
/// pivot; advancing the needle moves the tip along `-axis`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolPose {
    pub tip: Vector3<f64>,
    pub axis: Vector3<f64>,
    pub frame_id: u64,
}

impl ToolPose {
    pub fn new(tip: Vector3<f64>, axis: Vector3<f64>, frame_id: u64) -> Result<Self> {
        if !tip.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("tool tip must be finite".into()));
        }
        let norm = axis.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidConfig("tool axis must be non-zero".into()));
        }
        Ok(Self {
            tip,
            axis: axis / norm,
            frame_id,
        })
    }

    /// XY components of the tip (the selector `S p`).
    pub fn tip_xy(&self) -> Vector2<f64> {
        self.tip.xy()
    }

    /// A point `distance` micrometres up the shaft.
    pub fn shaft_point(&self, distance: f64) -> Vector3<f64> {
        self.tip + self.axis * distance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub radius_um: f64,
    pub thickness_um: f64,
    pub bump_amplitude_um: f64,
    pub base_height_um: f64,
    pub bump_count: usize,
    /// Bowl curvature radius; `None` for a flat base.
    pub curvature_radius_um: Option<f64>,
    /// Linear tilt of the base plane, dz/dx and dz/dy.
    pub plane_slope: [f64; 2],
    pub rcm_point_um: [f64; 3],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            radius_um: 3000.0,
            thickness_um: 200.0,
            bump_amplitude_um: 25.0,
            base_height_um: 0.0,
            bump_count: 6,
            curvature_radius_um: None,
            plane_slope: [0.0, 0.0],
            rcm_point_um: [-6000.0, -500.0, 5500.0],
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_um > 0.0) || !self.radius_um.is_finite() {
            return Err(Error::InvalidConfig("radius_um must be positive".into()));
        }
        if !(self.thickness_um > 0.0) || !self.thickness_um.is_finite() {
            return Err(Error::InvalidConfig("thickness_um must be positive".into()));
        }
        if !(self.bump_amplitude_um >= 0.0) {
            return Err(Error::InvalidConfig(
                "bump_amplitude_um must be non-negative".into(),
            ));
        }
        if self.bump_count > MAX_BUMPS {
            return Err(Error::InvalidConfig(format!(
                "bump_count must be at most {MAX_BUMPS}"
            )));
        }
        if let Some(rc) = self.curvature_radius_um {
            if !(rc > 0.0) {
                return Err(Error::InvalidConfig(
                    "curvature_radius_um must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Phantom description as stored on disk: the seed plus the geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomFile {
    pub seed: u64,
    #[serde(flatten)]
    pub config: PhantomConfig,
}

impl PhantomFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBump {
    pub center: Vector2<f64>,
    pub amplitude: f64,
    pub sigma: f64,
}

impl GaussianBump {
    fn value(&self, xy: &Vector2<f64>) -> f64 {
        let d2 = (xy - self.center).norm_squared();
        self.amplitude * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }

    fn gradient(&self, xy: &Vector2<f64>) -> Vector2<f64> {
        let d = xy - self.center;
        -d * (self.value(xy) / (self.sigma * self.sigma))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyePhantom {
    pub seed: u64,
    pub config: PhantomConfig,
    pub bumps: Vec<GaussianBump>,
    pub rcm_point: Vector3<f64>,
}

impl EyePhantom {
    /// Build the phantom for `seed`. Identical inputs give bit-identical
    /// surface parameters.
    pub fn generate(seed: u64, config: &PhantomConfig) -> Result<Self> {
        config.validate()?;
        let mut bumps = Vec::with_capacity(config.bump_count);
        if config.bump_amplitude_um > 0.0 {
            let mut rng = rng::substream(seed, "phantom.bumps", 0);
            let r = config.radius_um;
            for _ in 0..config.bump_count {
                let rho = 0.8 * r * rng.random::<f64>().sqrt();
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                bumps.push(GaussianBump {
                    center: Vector2::new(rho * theta.cos(), rho * theta.sin()),
                    amplitude: config.bump_amplitude_um * rng.random_range(-1.0..1.0),
                    sigma: r * rng.random_range(0.3..0.55),
                });
            }
        }
        let phantom = Self {
            seed,
            config: *config,
            bumps,
            rcm_point: Vector3::from(config.rcm_point_um),
        };
        let ceiling = phantom.max_ilm_bound();
        if phantom.rcm_point.z <= ceiling {
            return Err(Error::InvalidConfig(format!(
                "rcm point z = {} must lie above the retina (max height bound {ceiling:.1})",
                phantom.rcm_point.z
            )));
        }
        Ok(phantom)
    }

    pub fn radius(&self) -> f64 {
        self.config.radius_um
    }

    pub fn thickness(&self) -> f64 {
        self.config.thickness_um
    }

    pub fn contains(&self, xy: &Vector2<f64>) -> bool {
        xy.norm() <= self.config.radius_um
    }

    /// Unchecked surface evaluation, also used outside the disc by the
    /// renderers when a ray grazes the rim.
    pub fn ilm_height_unchecked(&self, xy: &Vector2<f64>) -> f64 {
        let c = &self.config;
        let mut z = c.base_height_um + c.plane_slope[0] * xy.x + c.plane_slope[1] * xy.y;
        if let Some(rc) = c.curvature_radius_um {
            z += xy.norm_squared() / (2.0 * rc);
        }
        z + self.bumps.iter().map(|b| b.value(xy)).sum::<f64>()
    }

    pub fn ilm_height_at(&self, xy: &Vector2<f64>) -> Result<f64> {
        if !self.contains(xy) {
            return Err(Error::OutOfDomain { x: xy.x, y: xy.y });
        }
        Ok(self.ilm_height_unchecked(xy))
    }

    pub fn rpe_height_at(&self, xy: &Vector2<f64>) -> Result<f64> {
        Ok(self.ilm_height_at(xy)? - self.config.thickness_um)
    }

    pub fn ilm_gradient(&self, xy: &Vector2<f64>) -> Vector2<f64> {
        let c = &self.config;
        let mut g = Vector2::new(c.plane_slope[0], c.plane_slope[1]);
        if let Some(rc) = c.curvature_radius_um {
            g += xy / rc;
        }
        self.bumps.iter().fold(g, |acc, b| acc + b.gradient(xy))
    }

    /// Upper bound of f_ILM over the disc.
    pub fn max_ilm_bound(&self) -> f64 {
        let c = &self.config;
        let r = c.radius_um;
        let slope = (c.plane_slope[0].powi(2) + c.plane_slope[1].powi(2)).sqrt();
        let bowl = c.curvature_radius_um.map_or(0.0, |rc| r * r / (2.0 * rc));
        let bumps: f64 = self.bumps.iter().map(|b| b.amplitude.max(0.0)).sum();
        c.base_height_um + slope * r + bowl + bumps
    }

    /// Signed height of `point` above the ILM directly below it.
    pub fn clearance(&self, point: &Vector3<f64>) -> f64 {
        point.z - self.ilm_height_unchecked(&point.xy())
    }
}

/// Immutable view of the scene at one simulation tick.
#[derive(Debug, Clone)]
pub struct SceneSnapshot {
    pub tool: ToolPose,
    pub phantom: Arc<EyePhantom>,
    pub sim_time: f64,
    pub inserted_depth: f64,
}

impl SceneSnapshot {
    pub fn new(tool: ToolPose, phantom: Arc<EyePhantom>, sim_time: f64) -> Self {
        let inserted_depth = (-phantom.clearance(&tool.tip)).max(0.0);
        Self {
            tool,
            phantom,
            sim_time,
            inserted_depth,
        }
    }
}
