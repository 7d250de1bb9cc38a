//! Evaluation metrics over completed trials.
//!
//! Pixel distances are converted to micrometres per image axis with
//! [`ConversionTable`] before any norm is taken.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::galvo::{GalvoCalibration, ScanLine};
use crate::imaging::Rig;
use crate::phantom::{PhantomConfig, ToolPose};
use crate::robot::TraceRow;
use crate::servo::{MotionCommand, Phase};
use crate::units;

/// Bumped whenever the serialized layout of [`TrialRecord`] changes.
pub const RECORD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConversionTable {
    /// µm per microscope pixel.
    pub microscope: f64,
    /// µm per B-scan row.
    pub bscan_height: f64,
    /// µm per B-scan column.
    pub bscan_width: f64,
    /// µm per volume slice.
    pub inter_slice: f64,
}

impl Default for ConversionTable {
    fn default() -> Self {
        Self {
            microscope: units::MICROSCOPE_UM_PER_PX,
            bscan_height: units::BSCAN_UM_PER_ROW,
            bscan_width: units::BSCAN_UM_PER_COL,
            inter_slice: units::BSCAN_UM_PER_SLICE,
        }
    }
}

impl ConversionTable {
    pub fn validate(&self) -> Result<()> {
        if [self.microscope, self.bscan_height, self.bscan_width, self.inter_slice]
            .iter()
            .all(|v| *v > 0.0)
        {
            Ok(())
        } else {
            Err(Error::InvalidConfig("conversion factors must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialStatus {
    Done,
    Aborted { phase: Phase, cause: AbortCause, detail: String },
}

impl TrialStatus {
    pub fn is_done(&self) -> bool {
        matches!(self, TrialStatus::Done)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortCause {
    /// Held on missing detections past the allowed time.
    Perception,
    Timeout,
    /// Planning or rendering refused the requested motion.
    Motion,
    /// A scripted goal could not be placed.
    Goal,
}

/// Scene definition sufficient to re-render any frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub phantom_seed: u64,
    pub phantom: PhantomConfig,
    pub rig: Rig,
    pub calibration: GalvoCalibration,
    pub calibration_rms_px: f64,
}

/// State at the end of lowering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalRecord {
    pub time: f64,
    /// Ground-truth microscope tip pixel.
    pub tip_rgb_truth: Vector2<f64>,
    /// Ground-truth B-scan tip pixel.
    pub tip_oct_truth: Vector2<f64>,
    /// Detected tip projected onto the ILM.
    pub ilm_px: Vector2<f64>,
    /// `ilm_px` raised by the safety offset.
    pub surface_goal_px: Vector2<f64>,
    pub tip_world: Vector3<f64>,
    /// Ground-truth height of the tip above the ILM, µm.
    pub clearance_um: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeResult {
    pub n_slices: usize,
    /// Slice holding the scan line itself.
    pub gt_slice: usize,
    pub actual_slice: usize,
    /// Tip (column, row) in `actual_slice`.
    pub landed_tip_px: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionRecord {
    pub distance_um: f64,
    pub line_origin: Vector3<f64>,
    /// Unit advance direction.
    pub line_direction: Vector3<f64>,
    /// Tip position at every control tick of INSERT.
    pub trace: Vec<Vector3<f64>>,
    /// B-scan line at the subretinal click.
    pub scan_line: ScanLine,
    pub volume: Option<VolumeResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub phase: Phase,
    pub start: f64,
    pub end: f64,
}

impl PhaseSpan {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Ground truth at one control tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickLog {
    pub tick: u64,
    pub time: f64,
    pub phase: Phase,
    pub tip: Vector3<f64>,
    pub axis: Vector3<f64>,
    pub rcm_error: f64,
    /// Tip height above the ILM below it, µm.
    pub clearance_um: f64,
}

impl From<&TickLog> for TraceRow {
    fn from(t: &TickLog) -> Self {
        TraceRow {
            tick: t.tick,
            time: t.time,
            tip: t.tip,
            axis: t.axis,
            rcm_error: t.rcm_error,
            phase: t.phase,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandLog {
    pub time: f64,
    pub phase: Phase,
    pub command: MotionCommand,
    /// Encoder tip position when the command was issued.
    pub from: Vector3<f64>,
    pub target: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Microscope,
    Bscan,
}

/// What a camera captured, enough to re-render it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub kind: FrameKind,
    pub time: f64,
    pub tool: ToolPose,
    pub scan_line: Option<ScanLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub format_version: u32,
    pub trial_index: usize,
    pub seed: u64,
    pub status: TrialStatus,
    pub scene: SceneRecord,
    pub goal_ilm_px: Option<Vector2<f64>>,
    pub goal_subretinal_px: Option<Vector2<f64>>,
    pub arrival: Option<ArrivalRecord>,
    pub insertion: Option<InsertionRecord>,
    pub phases: Vec<PhaseSpan>,
    pub ticks: Vec<TickLog>,
    pub commands: Vec<CommandLog>,
    /// Number of frames captured live; `frames` may be shorter if the
    /// record was cut.
    pub frame_count: usize,
    pub frames: Vec<FrameLog>,
    pub metrics: Option<TrialMetrics>,
}

impl TrialRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_str(text)?;
        let found = probe
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::InvalidConfig("record has no format_version".into()))? as u32;
        if found != RECORD_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: RECORD_FORMAT_VERSION,
                found,
            });
        }
        Ok(serde_json::from_value(probe)?)
    }

    pub fn max_rcm_error(&self) -> f64 {
        self.ticks.iter().map(|t| t.rcm_error).fold(0.0, f64::max)
    }

    pub fn trace_rows(&self) -> Vec<TraceRow> {
        self.ticks.iter().map(TraceRow::from).collect()
    }
}

/// Microscope navigation error: goal to ground-truth tip, µm.
pub fn nav_error_2d(rec: &TrialRecord) -> Result<f64> {
    let goal = rec.goal_ilm_px.ok_or(Error::MissingAnnotation("ILM goal"))?;
    let arrival = rec.arrival.as_ref().ok_or(Error::MissingAnnotation("surface arrival"))?;
    Ok(nav_error_2d_px(&goal, &arrival.tip_rgb_truth, &ConversionTable::default()))
}

pub fn nav_error_2d_px(goal: &Vector2<f64>, tip_truth: &Vector2<f64>, conv: &ConversionTable) -> f64 {
    (goal - tip_truth).norm() * conv.microscope
}

/// B-scan depth error at arrival: surface goal row to ground-truth tip row.
pub fn depth_error(rec: &TrialRecord) -> Result<f64> {
    let arrival = rec.arrival.as_ref().ok_or(Error::MissingAnnotation("surface arrival"))?;
    Ok(depth_error_rows(
        arrival.surface_goal_px.y,
        arrival.tip_oct_truth.y,
        &ConversionTable::default(),
    ))
}

pub fn depth_error_rows(goal_row: f64, tip_row: f64, conv: &ConversionTable) -> f64 {
    (goal_row - tip_row).abs() * conv.bscan_height
}

/// Navigation error with the depth term: L2 of the 2D and depth errors.
pub fn nav_error_l2(rec: &TrialRecord) -> Result<f64> {
    Ok(nav_error_2d(rec)?.hypot(depth_error(rec)?))
}

/// Subretinal goal error with slice offset, µm.
pub fn insertion_error(rec: &TrialRecord) -> Result<f64> {
    let (goal, vol) = insertion_inputs(rec)?;
    Ok(insertion_error_px(
        &goal,
        vol.gt_slice,
        &vol.landed_tip_px,
        vol.actual_slice,
        &ConversionTable::default(),
    ))
}

/// Row-only component of [`insertion_error`].
pub fn insertion_depth_error(rec: &TrialRecord) -> Result<f64> {
    let (goal, vol) = insertion_inputs(rec)?;
    Ok(depth_error_rows(goal.y, vol.landed_tip_px.y, &ConversionTable::default()))
}

fn insertion_inputs(rec: &TrialRecord) -> Result<(Vector2<f64>, VolumeResult)> {
    let goal = rec
        .goal_subretinal_px
        .ok_or(Error::MissingAnnotation("subretinal goal"))?;
    let vol = rec
        .insertion
        .as_ref()
        .and_then(|i| i.volume)
        .ok_or(Error::MissingAnnotation("post-insertion volume"))?;
    Ok((goal, vol))
}

pub fn insertion_error_px(
    goal: &Vector2<f64>,
    gt_slice: usize,
    landed: &Vector2<f64>,
    actual_slice: usize,
    conv: &ConversionTable,
) -> f64 {
    let d = goal - landed;
    let ds = gt_slice as f64 - actual_slice as f64;
    Vector3::new(d.x * conv.bscan_width, d.y * conv.bscan_height, ds * conv.inter_slice).norm()
}

/// Distance from `p` to the line through `origin` along unit `dir`.
pub fn point_line_distance(p: &Vector3<f64>, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
    let rel = p - origin;
    (rel - dir * rel.dot(dir)).norm()
}

/// Average and final displacement of an executed trace from a reference
/// line; `(0, 0)` for an empty trace.
pub fn ade_fde(trace: &[Vector3<f64>], origin: &Vector3<f64>, dir: &Vector3<f64>) -> (f64, f64) {
    if trace.is_empty() {
        return (0.0, 0.0);
    }
    let dir = dir.normalize();
    let d: Vec<f64> = trace.iter().map(|p| point_line_distance(p, origin, &dir)).collect();
    (d.iter().sum::<f64>() / d.len() as f64, *d.last().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PhaseDurations {
    pub per_phase: BTreeMap<Phase, f64>,
    /// Sum over non-waiting phases, s.
    pub total: f64,
}

pub fn phase_durations(spans: &[PhaseSpan]) -> PhaseDurations {
    let mut out = PhaseDurations::default();
    for s in spans {
        *out.per_phase.entry(s.phase).or_insert(0.0) += s.duration();
        if !s.phase.is_user_wait() {
            out.total += s.duration();
        }
    }
    out
}

/// Every metric for one trial; `None` where the trial did not get far
/// enough to define it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrialMetrics {
    pub nav_error_2d_um: Option<f64>,
    pub depth_error_um: Option<f64>,
    pub nav_error_l2_um: Option<f64>,
    pub surface_clearance_um: Option<f64>,
    pub insertion_error_um: Option<f64>,
    pub insertion_depth_error_um: Option<f64>,
    pub ade_um: Option<f64>,
    pub fde_um: Option<f64>,
    pub max_rcm_error_um: f64,
    pub mean_rcm_error_um: f64,
    pub durations: PhaseDurations,
}

pub fn compute_metrics(rec: &TrialRecord) -> TrialMetrics {
    let (ade, fde) = match &rec.insertion {
        Some(ins) if !ins.trace.is_empty() => {
            let (a, f) = ade_fde(&ins.trace, &ins.line_origin, &ins.line_direction);
            (Some(a), Some(f))
        }
        _ => (None, None),
    };
    let mean_rcm = if rec.ticks.is_empty() {
        0.0
    } else {
        rec.ticks.iter().map(|t| t.rcm_error).sum::<f64>() / rec.ticks.len() as f64
    };
    TrialMetrics {
        nav_error_2d_um: nav_error_2d(rec).ok(),
        depth_error_um: depth_error(rec).ok(),
        nav_error_l2_um: nav_error_l2(rec).ok(),
        surface_clearance_um: rec.arrival.map(|a| a.clearance_um),
        insertion_error_um: insertion_error(rec).ok(),
        insertion_depth_error_um: insertion_depth_error(rec).ok(),
        ade_um: ade,
        fde_um: fde,
        max_rcm_error_um: rec.max_rcm_error(),
        mean_rcm_error_um: mean_rcm,
        durations: phase_durations(&rec.phases),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two values.
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Some(Summary { mean, std, n })
}

/// Published hardware figure for side-by-side display.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub metric: String,
    pub summary: Option<Summary>,
    pub reference: Option<Reference>,
}

/// Wet-lab results reported for the autonomous arm.
pub fn reference_values() -> BTreeMap<&'static str, Reference> {
    BTreeMap::from([
        ("nav_error_2d_um", Reference { mean: 19.0, std: 6.0 }),
        ("nav_error_l2_um", Reference { mean: 20.0, std: 6.0 }),
        ("insertion_error_um", Reference { mean: 26.0, std: 12.0 }),
        ("insertion_depth_error_um", Reference { mean: 7.0, std: 11.0 }),
        ("mean_rcm_error_um", Reference { mean: 6.0, std: 4.0 }),
        ("total_duration_s", Reference { mean: 55.0, std: 10.8 }),
    ])
}

/// Mean and spread of every metric over the given trials.
pub fn aggregate<'a, I>(metrics: I) -> Vec<AggregateRow>
where
    I: IntoIterator<Item = &'a TrialMetrics>,
{
    let all: Vec<&TrialMetrics> = metrics.into_iter().collect();
    let refs = reference_values();
    let column = |f: &dyn Fn(&TrialMetrics) -> Option<f64>| -> Vec<f64> { all.iter().filter_map(|m| f(m)).collect() };
    let mut columns: Vec<(String, Vec<f64>)> = [
        ("nav_error_2d_um", column(&|m| m.nav_error_2d_um)),
        ("depth_error_um", column(&|m| m.depth_error_um)),
        ("nav_error_l2_um", column(&|m| m.nav_error_l2_um)),
        ("surface_clearance_um", column(&|m| m.surface_clearance_um)),
        ("insertion_error_um", column(&|m| m.insertion_error_um)),
        ("insertion_depth_error_um", column(&|m| m.insertion_depth_error_um)),
        ("ade_um", column(&|m| m.ade_um)),
        ("fde_um", column(&|m| m.fde_um)),
        ("max_rcm_error_um", column(&|m| Some(m.max_rcm_error_um))),
        ("mean_rcm_error_um", column(&|m| Some(m.mean_rcm_error_um))),
        ("total_duration_s", column(&|m| Some(m.durations.total))),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    for phase in Phase::ALL {
        let name = format!("duration_{}_s", phase.as_str().to_lowercase());
        columns.push((name, column(&|m| m.durations.per_phase.get(&phase).copied())));
    }
    columns
        .into_iter()
        .map(|(name, values)| AggregateRow {
            reference: refs.get(name.as_str()).copied(),
            summary: summarize(&values),
            metric: name,
        })
        .collect()
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], mut out: W) -> Result<()> {
    writeln!(out, "metric,mean,std,n,reference_mean,reference_std")?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.metric,
            opt(r.summary.map(|s| s.mean)),
            opt(r.summary.map(|s| s.std)),
            r.summary.map_or(0, |s| s.n),
            opt(r.reference.map(|s| s.mean)),
            opt(r.reference.map(|s| s.std)),
        )?;
    }
    Ok(())
}
