//! Galvo voltage to scan-position calibration.
//!
//! The laser spot position in the microscope image is modelled as an affine
//! function of the two mirror voltages, `X = R V + T`, with `R` in pixels per
//! volt and `T` in pixels. The fit is the closed-form least-squares solution
//! on mean-centred samples:
//!
//! ```text
//! R^T = (Vc Vc^T)^-1 Vc Xc^T,    T = mean(X) - R mean(V)
//! ```
//!
//! Scan lines centred on the needle tip are produced by inverting the map at
//! the tip and along the needle direction.

use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units;

const MIN_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GalvoCalibration {
    /// Pixels per volt.
    pub r: Matrix2<f64>,
    /// Pixels.
    pub t: Vector2<f64>,
}

impl GalvoCalibration {
    pub fn new(r: Matrix2<f64>, t: Vector2<f64>) -> Self {
        Self { r, t }
    }

    pub fn identity() -> Self {
        Self::new(Matrix2::identity(), Vector2::zeros())
    }

    pub fn determinant(&self) -> f64 {
        self.r.determinant()
    }

    pub fn is_invertible(&self) -> bool {
        self.determinant().abs() > MIN_DET
    }

    /// Laser position in microscope pixels for mirror voltages `v`.
    pub fn forward(&self, v: &Vector2<f64>) -> Vector2<f64> {
        self.r * v + self.t
    }

    fn inverse_r(&self) -> Result<Matrix2<f64>> {
        let det = self.determinant();
        if det.abs() <= MIN_DET || !det.is_finite() {
            return Err(Error::SingularCalibration { det });
        }
        self.r
            .try_inverse()
            .ok_or(Error::SingularCalibration { det })
    }

    /// Sum of squared residuals over a sample set.
    pub fn residual_sum_squares(&self, samples: &CalibrationSampleSet) -> f64 {
        samples
            .pairs()
            .map(|(v, x)| (self.forward(v) - x).norm_squared())
            .sum()
    }

    pub fn rms_residual(&self, samples: &CalibrationSampleSet) -> f64 {
        (self.residual_sum_squares(samples) / samples.len() as f64).sqrt()
    }

    pub fn to_record(&self) -> CalibrationRecord {
        CalibrationRecord {
            r11: self.r[(0, 0)],
            r12: self.r[(0, 1)],
            r21: self.r[(1, 0)],
            r22: self.r[(1, 1)],
            t1: self.t.x,
            t2: self.t.y,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string(&self.to_record())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rec: CalibrationRecord = toml::from_str(&std::fs::read_to_string(path)?)?;
        Ok(rec.into())
    }
}

/// Six-number on-disk form of a calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    pub r11: f64,
    pub r12: f64,
    pub r21: f64,
    pub r22: f64,
    pub t1: f64,
    pub t2: f64,
}

impl From<CalibrationRecord> for GalvoCalibration {
    fn from(c: CalibrationRecord) -> Self {
        GalvoCalibration::new(
            Matrix2::new(c.r11, c.r12, c.r21, c.r22),
            Vector2::new(c.t1, c.t2),
        )
    }
}

/// Paired mirror voltages and observed laser positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSampleSet {
    voltages: Vec<Vector2<f64>>,
    positions: Vec<Vector2<f64>>,
}

impl CalibrationSampleSet {
    pub fn new(voltages: Vec<Vector2<f64>>, positions: Vec<Vector2<f64>>) -> Result<Self> {
        if voltages.len() != positions.len() {
            return Err(Error::NonIdentifiable(format!(
                "{} voltages but {} positions",
                voltages.len(),
                positions.len()
            )));
        }
        if voltages.len() < 3 {
            return Err(Error::NonIdentifiable(format!(
                "need at least 3 samples, got {}",
                voltages.len()
            )));
        }
        Ok(Self {
            voltages,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.voltages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltages.is_empty()
    }

    pub fn voltages(&self) -> &[Vector2<f64>] {
        &self.voltages
    }

    pub fn positions(&self) -> &[Vector2<f64>] {
        &self.positions
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&Vector2<f64>, &Vector2<f64>)> {
        self.voltages.iter().zip(&self.positions)
    }

    pub fn mean_voltage(&self) -> Vector2<f64> {
        mean(&self.voltages)
    }

    pub fn mean_position(&self) -> Vector2<f64> {
        mean(&self.positions)
    }
}

fn mean(points: &[Vector2<f64>]) -> Vector2<f64> {
    points.iter().sum::<Vector2<f64>>() / points.len() as f64
}

/// Closed-form least-squares fit of `X = R V + T`.
pub fn fit_calibration(samples: &CalibrationSampleSet) -> Result<GalvoCalibration> {
    let v_bar = samples.mean_voltage();
    let x_bar = samples.mean_position();

    // Vc Vc^T and Vc Xc^T accumulated column by column.
    let mut vv = Matrix2::zeros();
    let mut vx = Matrix2::zeros();
    for (v, x) in samples.pairs() {
        let dv = v - v_bar;
        let dx = x - x_bar;
        vv += dv * dv.transpose();
        vx += dv * dx.transpose();
    }

    let scale = vv.trace().max(f64::MIN_POSITIVE);
    let det = vv.determinant();
    if det.abs() <= 1e-12 * scale * scale {
        return Err(Error::NonIdentifiable(
            "voltage samples are collinear; centred voltage matrix has rank < 2".into(),
        ));
    }
    let vv_inv = vv.try_inverse().ok_or_else(|| {
        Error::NonIdentifiable("centred voltage scatter matrix is singular".into())
    })?;
    let r = (vv_inv * vx).transpose();
    let t = x_bar - r * v_bar;
    Ok(GalvoCalibration::new(r, t))
}

/// Central voltage for a scan centred at image position `x0`.
pub fn voltage_for_position(calib: &GalvoCalibration, x0: &Vector2<f64>) -> Result<Vector2<f64>> {
    Ok(calib.inverse_r()? * (x0 - calib.t))
}

/// Voltage tangent for an image-space tangent `dx`.
pub fn voltage_tangent(calib: &GalvoCalibration, dx: &Vector2<f64>) -> Result<Vector2<f64>> {
    Ok(calib.inverse_r()? * dx)
}

/// Straight B-scan line in microscope pixels, `X(t) = center + t * tangent`
/// for `t` in (-1, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanLine {
    pub center: Vector2<f64>,
    pub tangent: Vector2<f64>,
    pub n_columns: usize,
}

impl ScanLine {
    pub fn new(center: Vector2<f64>, tangent: Vector2<f64>, n_columns: usize) -> Result<Self> {
        let line = Self {
            center,
            tangent,
            n_columns,
        };
        line.validate()?;
        Ok(line)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tangent.norm() > 0.0) {
            return Err(Error::DegenerateScanLine("tangent must be non-zero"));
        }
        if self.n_columns < 2 {
            return Err(Error::DegenerateScanLine("need at least two columns"));
        }
        if !self.center.iter().chain(self.tangent.iter()).all(|v| v.is_finite()) {
            return Err(Error::DegenerateScanLine("non-finite geometry"));
        }
        Ok(())
    }

    /// Unit direction of the scan in the image.
    pub fn direction(&self) -> Vector2<f64> {
        self.tangent.normalize()
    }

    /// Unit normal, rotated +90 degrees from the direction.
    pub fn normal(&self) -> Vector2<f64> {
        let d = self.direction();
        Vector2::new(-d.y, d.x)
    }

    /// Cell-centred scan parameter of column `k`.
    pub fn column_parameter(&self, k: usize) -> f64 {
        -1.0 + 2.0 * (k as f64 + 0.5) / self.n_columns as f64
    }

    /// Fractional column index for scan parameter `t`.
    pub fn column_of_parameter(&self, t: f64) -> f64 {
        (t + 1.0) * self.n_columns as f64 / 2.0 - 0.5
    }

    pub fn center_column(&self) -> f64 {
        self.column_of_parameter(0.0)
    }

    pub fn point_at(&self, t: f64) -> Vector2<f64> {
        self.center + self.tangent * t
    }

    /// Same line shifted by `offset_px` along the normal.
    pub fn offset(&self, offset_px: f64) -> Self {
        Self {
            center: self.center + self.normal() * offset_px,
            ..*self
        }
    }
}

/// Voltages driving the mirrors for every column of `line`.
pub fn scan_line_voltages(calib: &GalvoCalibration, line: &ScanLine) -> Result<Vec<Vector2<f64>>> {
    line.validate()?;
    let v0 = voltage_for_position(calib, &line.center)?;
    let dv = voltage_tangent(calib, &line.tangent)?;
    Ok((0..line.n_columns)
        .map(|k| v0 + dv * line.column_parameter(k))
        .collect())
}

/// Calibration acquisition settings for the simulated laser viewing card.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewingCardConfig {
    /// Grid points per axis.
    pub grid_size: usize,
    /// Half-range of the voltage grid, volts.
    pub voltage_range: f64,
    /// Std-dev of the spot localisation error, pixels.
    pub position_noise_px: f64,
}

impl Default for ViewingCardConfig {
    fn default() -> Self {
        Self {
            grid_size: 5,
            voltage_range: 4.0,
            position_noise_px: 0.25,
        }
    }
}

/// Record laser spot positions for a square voltage grid through the hidden
/// mirror model `truth`.
pub fn acquire_viewing_card_samples<R: Rng + ?Sized>(
    truth: &GalvoCalibration,
    cfg: &ViewingCardConfig,
    rng: &mut R,
) -> Result<CalibrationSampleSet> {
    if cfg.grid_size < 2 {
        return Err(Error::InvalidConfig("viewing card grid needs >= 2 points per axis".into()));
    }
    let n = cfg.grid_size;
    let step = 2.0 * cfg.voltage_range / (n - 1) as f64;
    let noise = Normal::new(0.0, cfg.position_noise_px.max(0.0))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut voltages = Vec::with_capacity(n * n);
    let mut positions = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let v = Vector2::new(
                -cfg.voltage_range + step * i as f64,
                -cfg.voltage_range + step * j as f64,
            );
            let mut x = truth.forward(&v);
            if cfg.position_noise_px > 0.0 {
                x += Vector2::new(noise.sample(rng), noise.sample(rng));
            }
            voltages.push(v);
            positions.push(x);
        }
    }
    CalibrationSampleSet::new(voltages, positions)
}

/// Mirror model used as the hidden ground truth by the default simulator rig.
pub fn default_true_galvo() -> GalvoCalibration {
    GalvoCalibration::new(
        Matrix2::new(38.5, 1.2, -0.9, 41.0),
        Vector2::new(
            units::MICROSCOPE_WIDTH as f64 / 2.0 + 3.0,
            units::MICROSCOPE_HEIGHT as f64 / 2.0 - 2.0,
        ),
    )
}
