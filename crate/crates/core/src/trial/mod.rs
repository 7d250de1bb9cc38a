//! Trial orchestration: configuration, the tick-based session that runs
//! one trial, batch experiments and replay.
//!
//! A [`TrialConfig`] fully determines a batch. One master seed fans out to
//! named sub-streams (phantom geometry, start pose, goals, perception
//! noise, actuation noise, calibration noise), so toggling one noise source
//! never shifts the others.

mod batch;
mod replay;
mod session;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::galvo::{CalibrationRecord, GalvoCalibration, ViewingCardConfig};
use crate::imaging::{BScanConfig, CameraModel, NoiseConfig, RenderMode, Rig};
use crate::phantom::PhantomConfig;
use crate::robot::{ActuationNoise, MotionLimits};
use crate::servo::{ServoConfig, WorkflowConfig};

pub use batch::{batch_hash, run_batch, write_batch, BatchReport};
pub use replay::{replay, replay_file, ReplayFrame, ReplayOutput};
pub use session::{Click, ClickAck, Session, TickEvents};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    /// Goals generated from ground truth, clicked after `click_delay_s`.
    #[default]
    Scripted,
    /// Goals arrive from an operator through [`Session::apply_click`].
    Interactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalConfig {
    pub mode: GoalMode,
    /// Start tips are drawn uniformly in a disc of this radius, µm.
    pub start_xy_radius_um: f64,
    /// Start height above the ILM, µm.
    pub start_height_um: [f64; 2],
    /// Distance of the microscope goal from the start tip, px.
    pub ilm_goal_distance_px: [f64; 2],
    /// Depth of the subretinal goal below the ILM along the tool axis, µm.
    pub subretinal_depth_um: [f64; 2],
    /// Simulated operator reaction time before each scripted click, s.
    pub click_delay_s: f64,
}

impl Default for GoalConfig {
    fn default() -> Self {
        Self {
            mode: GoalMode::Scripted,
            start_xy_radius_um: 600.0,
            start_height_um: [400.0, 700.0],
            ilm_goal_distance_px: [20.0, 80.0],
            subretinal_depth_um: [100.0, 170.0],
            click_delay_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    /// Continuous HOLD longer than this aborts the trial, s.
    pub hold_timeout_s: f64,
    /// Simulated time limit for one trial, operator waits excluded, s.
    pub trial_timeout_s: f64,
    pub volume_slices: usize,
    /// Spacing of volume slices, microscope px.
    pub volume_spacing_px: f64,
    pub render_mode: RenderMode,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            hold_timeout_s: 5.0,
            trial_timeout_s: 120.0,
            volume_slices: 32,
            volume_spacing_px: 1.0,
            render_mode: RenderMode::Annotations,
        }
    }
}

/// Everything that defines a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub master_seed: u64,
    pub trials: usize,
    pub trials_per_phantom: usize,
    pub phantom: PhantomConfig,
    pub camera: CameraModel,
    pub bscan: BScanConfig,
    /// The physical mirror map; hidden from the controller.
    pub galvo_truth: CalibrationRecord,
    pub viewing_card: ViewingCardConfig,
    pub perception: NoiseConfig,
    pub actuation: ActuationNoise,
    pub servo: ServoConfig,
    pub workflow: WorkflowConfig,
    pub limits: MotionLimits,
    pub goals: GoalConfig,
    pub session: SessionConfig,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            master_seed: 2024,
            trials: 30,
            trials_per_phantom: 10,
            phantom: PhantomConfig::default(),
            camera: CameraModel {
                tilt_rad: [0.01, -0.008],
                ..Default::default()
            },
            bscan: BScanConfig::default(),
            galvo_truth: crate::galvo::default_true_galvo().to_record(),
            viewing_card: ViewingCardConfig::default(),
            perception: NoiseConfig::default(),
            actuation: ActuationNoise::new(2.0),
            servo: ServoConfig::default(),
            workflow: WorkflowConfig::default(),
            limits: MotionLimits::default(),
            goals: GoalConfig::default(),
            session: SessionConfig::default(),
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.camera.validate()?;
        self.perception.validate()?;
        self.actuation.validate()?;
        self.servo.validate()?;
        self.workflow.validate()?;
        self.limits.validate()?;
        if self.trials_per_phantom == 0 {
            return Err(Error::InvalidConfig("trials_per_phantom must be >= 1".into()));
        }
        if !GalvoCalibration::from(self.galvo_truth).is_invertible() {
            return Err(Error::InvalidConfig("galvo_truth must be invertible".into()));
        }
        let g = &self.goals;
        for (name, r) in [
            ("start_height_um", g.start_height_um),
            ("ilm_goal_distance_px", g.ilm_goal_distance_px),
            ("subretinal_depth_um", g.subretinal_depth_um),
        ] {
            if !(r[0] >= 0.0 && r[1] >= r[0]) {
                return Err(Error::InvalidConfig(format!("{name} must be an ordered non-negative range")));
            }
        }
        if !(self.session.hold_timeout_s > 0.0 && self.session.trial_timeout_s > 0.0) {
            return Err(Error::InvalidConfig("session timeouts must be positive".into()));
        }
        if self.session.volume_slices == 0 {
            return Err(Error::InvalidConfig("volume_slices must be >= 1".into()));
        }
        Ok(())
    }

    pub fn rig(&self) -> Rig {
        Rig {
            camera: self.camera,
            galvo_truth: self.galvo_truth.into(),
            bscan: self.bscan,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Seed of the phantom used by trial `index`.
    pub fn phantom_seed(&self, index: usize) -> u64 {
        crate::rng::subseed(self.master_seed, "phantom", (index / self.trials_per_phantom) as u64)
    }

    pub fn trial_seed(&self, index: usize) -> u64 {
        crate::rng::subseed(self.master_seed, "trial", index as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = TrialConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrialConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = TrialConfig::from_toml("master_seed = 7\n[servo]\nbeta = 0.25\n").unwrap();
        assert_eq!(cfg.master_seed, 7);
        assert_eq!(cfg.servo.beta, 0.25);
        assert_eq!(cfg.servo.pixel_update_threshold, 8.0);
        assert_eq!(cfg.workflow.safety_offset_um, 30.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(TrialConfig::from_toml("bogus = 1\n").is_err());
        assert!(TrialConfig::from_toml("[servo]\nbeta = 1.5\n").is_err());
        assert!(TrialConfig::from_toml("[goals]\nstart_height_um = [700.0, 400.0]\n").is_err());
    }

    #[test]
    fn three_phantoms_by_default() {
        let cfg = TrialConfig::default();
        let seeds: std::collections::BTreeSet<_> = (0..cfg.trials).map(|i| cfg.phantom_seed(i)).collect();
        assert_eq!(seeds.len(), 3);
        assert_eq!(cfg.phantom_seed(0), cfg.phantom_seed(9));
        assert_ne!(cfg.phantom_seed(9), cfg.phantom_seed(10));
    }
}
