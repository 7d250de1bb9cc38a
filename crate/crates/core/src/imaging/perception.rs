//! Perception oracle.
//!
//! Reads the ground-truth annotations carried by rendered frames and
//! optionally corrupts them with zero-mean pixel noise and per-field
//! dropout, reproducing the interface of the keypoint and layer
//! segmentation networks: tip and base in both views (50 px and 100 px
//! apart) plus ILM and RPE top-surface profiles in the B-scan.

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BScanFrame, MicroscopeFrame};
use crate::error::{Error, Result};
use crate::galvo::ScanLine;
use crate::units;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Std-dev of keypoint noise, pixels.
    pub pixel_sigma: f64,
    /// Probability that a detection field is reported invalid.
    pub dropout_rate: f64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_sigma >= 0.0) {
            return Err(Error::InvalidConfig("pixel_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig("dropout_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroscopeDetection {
    pub tip: Option<Vector2<f64>>,
    pub base: Option<Vector2<f64>>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BScanDetection {
    pub tip: Option<Vector2<f64>>,
    pub base: Option<Vector2<f64>>,
    pub ilm_profile: Option<Vec<Option<f64>>>,
    pub rpe_profile: Option<Vec<Option<f64>>>,
    pub timestamp: f64,
}

/// Keypoints and layer profiles from one microscope frame and one B-scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PerceptionResult {
    pub tip_rgb: Option<Vector2<f64>>,
    pub base_rgb: Option<Vector2<f64>>,
    pub tip_oct: Option<Vector2<f64>>,
    pub base_oct: Option<Vector2<f64>>,
    pub ilm_profile: Option<Vec<Option<f64>>>,
    pub rpe_profile: Option<Vec<Option<f64>>>,
}

impl PerceptionResult {
    pub fn from_parts(ms: Option<&MicroscopeDetection>, bs: Option<&BScanDetection>) -> Self {
        let mut out = Self::default();
        if let Some(ms) = ms {
            out.tip_rgb = ms.tip;
            out.base_rgb = ms.base;
        }
        if let Some(bs) = bs {
            out.tip_oct = bs.tip;
            out.base_oct = bs.base;
            out.ilm_profile = bs.ilm_profile.clone();
            out.rpe_profile = bs.rpe_profile.clone();
        }
        out
    }

    /// Every field marked invalid.
    pub fn invalid() -> Self {
        Self::default()
    }
}

fn noisy_keypoints<R: Rng + ?Sized>(
    tip: Vector2<f64>,
    base: Vector2<f64>,
    spacing: f64,
    noise: &NoiseConfig,
    rng: &mut R,
) -> (Vector2<f64>, Vector2<f64>) {
    let dir = (base - tip).normalize();
    let tip = if noise.pixel_sigma > 0.0 {
        let n = Normal::new(0.0, noise.pixel_sigma).expect("validated sigma");
        tip + Vector2::new(n.sample(rng), n.sample(rng))
    } else {
        tip
    };
    (tip, tip + dir * spacing)
}

fn dropped<R: Rng + ?Sized>(noise: &NoiseConfig, rng: &mut R) -> bool {
    noise.dropout_rate > 0.0 && rng.random::<f64>() < noise.dropout_rate
}

pub fn perceive_microscope<R: Rng + ?Sized>(
    frame: &MicroscopeFrame,
    noise: &NoiseConfig,
    rng: &mut R,
) -> MicroscopeDetection {
    let a = &frame.annotations;
    let drop = dropped(noise, rng);
    let (tip, base) = if a.tool_visible && !drop {
        let (t, b) = noisy_keypoints(a.tip_px, a.base_px, units::MICROSCOPE_TIP_BASE_PX, noise, rng);
        (Some(t), Some(b))
    } else {
        (None, None)
    };
    MicroscopeDetection {
        tip,
        base,
        timestamp: frame.timestamp,
    }
}

pub fn perceive_bscan<R: Rng + ?Sized>(
    frame: &BScanFrame,
    noise: &NoiseConfig,
    rng: &mut R,
) -> BScanDetection {
    let a = &frame.annotations;
    let drop_tip = dropped(noise, rng);
    let drop_layers = dropped(noise, rng);
    let (tip, base) = match (a.tip_px, a.base_px, drop_tip) {
        (Some(t), Some(b), false) => {
            let (t, b) = noisy_keypoints(t, b, units::BSCAN_TIP_BASE_PX, noise, rng);
            (Some(t), Some(b))
        }
        _ => (None, None),
    };
    let (ilm_profile, rpe_profile) = if drop_layers {
        (None, None)
    } else {
        (Some(a.ilm_rows.clone()), Some(a.rpe_rows.clone()))
    };
    BScanDetection {
        tip,
        base,
        ilm_profile,
        rpe_profile,
        timestamp: frame.timestamp,
    }
}

/// Detect keypoints and layers in a microscope frame and a B-scan of the
/// same tick.
pub fn perceive<R: Rng + ?Sized>(
    ms: &MicroscopeFrame,
    bs: &BScanFrame,
    noise: &NoiseConfig,
    rng: &mut R,
) -> PerceptionResult {
    let m = perceive_microscope(ms, noise, rng);
    let b = perceive_bscan(bs, noise, rng);
    PerceptionResult::from_parts(Some(&m), Some(&b))
}

/// Scan line centred at the detected tip, running along the detected
/// needle axis (base to tip), `scan_length_px` long.
pub fn track_tool_scanline(perception: &PerceptionResult, scan_length_px: f64) -> Result<ScanLine> {
    let (tip, base) = match (perception.tip_rgb, perception.base_rgb) {
        (Some(t), Some(b)) => (t, b),
        _ => return Err(Error::InvalidDetection("microscope tip/base not detected")),
    };
    if !(scan_length_px > 0.0) {
        return Err(Error::DegenerateScanLine("scan length must be positive"));
    }
    let dir = (tip - base)
        .try_normalize(1e-12)
        .ok_or(Error::DegenerateScanLine("tip and base coincide"))?;
    ScanLine::new(tip, dir * (scan_length_px / 2.0), units::BSCAN_COLUMNS as usize)
}

/// Row of a profile at a fractional column, linearly interpolated.
pub fn profile_row_at(profile: &[Option<f64>], column: f64) -> Option<f64> {
    if profile.is_empty() || !column.is_finite() {
        return None;
    }
    let last = (profile.len() - 1) as f64;
    if column < 0.0 || column > last {
        return None;
    }
    let lo = column.floor() as usize;
    let hi = column.ceil() as usize;
    let frac = column - lo as f64;
    match (profile[lo], profile[hi]) {
        (Some(a), Some(b)) => Some(a + (b - a) * frac),
        _ => None,
    }
}

/// Projection of the B-scan tip onto the ILM along its image column.
pub fn project_tip_to_ilm(perception: &PerceptionResult) -> Result<Vector2<f64>> {
    let tip = perception
        .tip_oct
        .ok_or(Error::InvalidDetection("B-scan tip not detected"))?;
    let profile = perception
        .ilm_profile
        .as_ref()
        .ok_or(Error::InvalidDetection("ILM segmentation missing"))?;
    let row = profile_row_at(profile, tip.x)
        .ok_or(Error::InvalidDetection("tip column outside ILM profile support"))?;
    Ok(Vector2::new(tip.x, row))
}
