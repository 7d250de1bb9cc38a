//! Uncalibrated visual servoing and the navigation/insertion workflow.
//!
//! The hand-eye map between planar robot motion (µm) and microscope pixel
//! motion is never calibrated offline. [`ServoState`] keeps a 2x2 estimate
//! `J` refined with Broyden's rank-one secant update whenever both the
//! accumulated pixel motion and the accumulated robot motion are
//! significant. The planar goal-directed step is then `J^-1 (goal - tip)`.
//!
//! [`step_workflow`] sequences the task: align the tip with the clicked
//! microscope goal, lower it towards the retina until the B-scan shows it
//! at the safety-offset surface goal (realigning whenever the microscope
//! error exceeds the threshold), wait for the subretinal click, then
//! advance along the tool axis by the insertion distance.

use std::fmt;

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::perception::{profile_row_at, PerceptionResult};
use crate::units;

/// Determinant magnitude below which `J` is treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServoConfig {
    pub beta: f64,
    /// Accumulated pixel motion required before an update, px.
    pub pixel_update_threshold: f64,
    /// Accumulated planar robot motion required before an update, µm.
    pub motion_update_threshold: f64,
    /// Cap on the norm of one planar step, µm.
    pub max_planar_step_um: f64,
    /// Length of each bootstrap probe, µm.
    pub probe_step_um: f64,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            pixel_update_threshold: 8.0,
            motion_update_threshold: 20.0,
            max_planar_step_um: 50.0,
            probe_step_um: 30.0,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig("beta must lie in [0, 1]".into()));
        }
        for (name, v) in [
            ("pixel_update_threshold", self.pixel_update_threshold),
            ("motion_update_threshold", self.motion_update_threshold),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        for (name, v) in [
            ("max_planar_step_um", self.max_planar_step_um),
            ("probe_step_um", self.probe_step_um),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Progress of the two-probe excitation that seeds `J`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bootstrap {
    /// Next probe to issue (0 or 1).
    Pending(u8),
    /// Probe `n` issued, awaiting the observation after it.
    Probing(u8),
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoState {
    /// Image Jacobian estimate, px/µm.
    pub j: Matrix2<f64>,
    pub beta: f64,
    pub pixel_update_threshold: f64,
    pub motion_update_threshold: f64,
    pub max_planar_step_um: f64,
    pub probe_step_um: f64,
    /// Reference tip pixel for the accumulated delta.
    pub last_tip_rgb: Option<Vector2<f64>>,
    /// Reference planar robot position for the accumulated delta, µm.
    pub last_p_bar: Option<Vector2<f64>>,
    pub bootstrap: Bootstrap,
    pub updates: u32,
    pub reinitialisations: u32,
}

impl ServoState {
    pub fn new(cfg: &ServoConfig) -> Self {
        Self {
            j: Matrix2::identity(),
            beta: cfg.beta,
            pixel_update_threshold: cfg.pixel_update_threshold,
            motion_update_threshold: cfg.motion_update_threshold,
            max_planar_step_um: cfg.max_planar_step_um,
            probe_step_um: cfg.probe_step_um,
            last_tip_rgb: None,
            last_p_bar: None,
            bootstrap: Bootstrap::Pending(0),
            updates: 0,
            reinitialisations: 0,
        }
    }

    /// Reset `J` to identity and restart the bootstrap.
    pub fn reinitialise(&mut self) {
        self.j = Matrix2::identity();
        self.bootstrap = Bootstrap::Pending(0);
        self.last_tip_rgb = None;
        self.last_p_bar = None;
        self.reinitialisations += 1;
    }

    pub fn set_reference(&mut self, tip_rgb: Vector2<f64>, p_bar: Vector2<f64>) {
        self.last_tip_rgb = Some(tip_rgb);
        self.last_p_bar = Some(p_bar);
    }

    /// Deltas against the stored reference, if one is set.
    pub fn deltas(&self, tip_rgb: &Vector2<f64>, p_bar: &Vector2<f64>) -> Option<(Vector2<f64>, Vector2<f64>)> {
        match (self.last_tip_rgb, self.last_p_bar) {
            (Some(i), Some(p)) => Some((tip_rgb - i, p_bar - p)),
            _ => None,
        }
    }

    pub fn is_bootstrapped(&self) -> bool {
        self.bootstrap == Bootstrap::Done
    }
}

/// `J <- J + beta (di - J dp) dp^T / (dp^T dp)`.
pub fn broyden_update(state: &ServoState, delta_i: &Vector2<f64>, delta_p: &Vector2<f64>) -> Result<ServoState> {
    let dp2 = delta_p.norm_squared();
    if !(dp2 > 0.0) {
        return Err(Error::ZeroMotion);
    }
    let residual = delta_i - state.j * delta_p;
    let mut next = state.clone();
    next.j += state.beta * residual * delta_p.transpose() / dp2;
    next.updates += 1;
    Ok(next)
}

pub fn should_update(state: &ServoState, delta_i: &Vector2<f64>, delta_p: &Vector2<f64>) -> bool {
    delta_i.norm() > state.pixel_update_threshold && delta_p.norm() > state.motion_update_threshold
}

/// Planar robot displacement that moves the tip pixel onto the goal under
/// the current Jacobian estimate.
pub fn desired_planar_motion(state: &ServoState, goal_px: &Vector2<f64>, tip_px: &Vector2<f64>) -> Result<Vector2<f64>> {
    let det = state.j.determinant();
    if !(det.abs() > SINGULAR_DET) || !det.is_finite() {
        return Err(Error::SingularJacobian { det });
    }
    let inv = state.j.try_inverse().ok_or(Error::SingularJacobian { det })?;
    Ok(inv * (goal_px - tip_px))
}

/// Scale `v` down so that its norm does not exceed `cap`.
pub fn clamp_norm(v: Vector2<f64>, cap: f64) -> Vector2<f64> {
    let n = v.norm();
    if n > cap {
        v * (cap / n)
    } else {
        v
    }
}

/// Insertion distance between the B-scan tip and the subretinal goal,
/// each image axis converted to µm before the Euclidean norm.
pub fn compute_insertion_distance(goal_oct_px: &Vector2<f64>, tip_oct_px: &Vector2<f64>) -> f64 {
    let d = goal_oct_px - tip_oct_px;
    ((d.x * units::BSCAN_UM_PER_COL).powi(2) + (d.y * units::BSCAN_UM_PER_ROW).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    AwaitIlmGoal,
    AlignXy,
    LowerZ,
    AtSurface,
    AwaitSubretinalGoal,
    Insert,
    Done,
    Hold,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::AwaitIlmGoal,
        Phase::AlignXy,
        Phase::LowerZ,
        Phase::AtSurface,
        Phase::AwaitSubretinalGoal,
        Phase::Insert,
        Phase::Done,
        Phase::Hold,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::AwaitIlmGoal => "AWAIT_ILM_GOAL",
            Phase::AlignXy => "ALIGN_XY",
            Phase::LowerZ => "LOWER_Z",
            Phase::AtSurface => "AT_SURFACE",
            Phase::AwaitSubretinalGoal => "AWAIT_SUBRETINAL_GOAL",
            Phase::Insert => "INSERT",
            Phase::Done => "DONE",
            Phase::Hold => "HOLD",
        }
    }

    /// Phases spent waiting on the operator; excluded from task time.
    pub fn is_user_wait(&self) -> bool {
        matches!(self, Phase::AwaitIlmGoal | Phase::AwaitSubretinalGoal)
    }

    /// Whether `p` carries every field this phase acts on.
    fn perception_ok(&self, p: &PerceptionResult) -> bool {
        match self {
            Phase::AlignXy => p.tip_rgb.is_some(),
            Phase::LowerZ => p.tip_rgb.is_some() && p.tip_oct.is_some() && p.ilm_profile.is_some(),
            Phase::Insert => p.tip_oct.is_some(),
            _ => true,
        }
    }

    /// Whether the controller needs a B-scan taken after the last motion
    /// before stepping this phase.
    pub fn needs_bscan(&self) -> bool {
        matches!(self, Phase::LowerZ | Phase::Insert)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkflowConfig {
    /// Height above the ILM at which lowering stops, µm.
    pub safety_offset_um: f64,
    /// Microscope error above which lowering yields to realignment, px.
    pub realign_threshold_px: f64,
    pub z_step_um: f64,
    pub z_fine_step_um: f64,
    /// Remaining gap below which the fine Z step is used, µm.
    pub z_fine_zone_um: f64,
    /// Lowering stops once the tip is within this band above the
    /// surface goal, µm.
    pub surface_band_um: f64,
    pub insert_step_um: f64,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            safety_offset_um: 30.0,
            realign_threshold_px: 1.0,
            z_step_um: 50.0,
            z_fine_step_um: 10.0,
            z_fine_zone_um: 100.0,
            surface_band_um: 3.0,
            insert_step_um: 20.0,
        }
    }
}

impl WorkflowConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("safety_offset_um", self.safety_offset_um),
            ("realign_threshold_px", self.realign_threshold_px),
            ("z_step_um", self.z_step_um),
            ("z_fine_step_um", self.z_fine_step_um),
            ("z_fine_zone_um", self.z_fine_zone_um),
            ("surface_band_um", self.surface_band_um),
            ("insert_step_um", self.insert_step_um),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.z_fine_step_um > self.z_step_um {
            return Err(Error::InvalidConfig("z_fine_step_um exceeds z_step_um".into()));
        }
        Ok(())
    }
}

/// What the B-scan showed when lowering stopped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceArrival {
    /// Tip projected onto the ILM, (column, row).
    pub ilm_px: Vector2<f64>,
    /// `ilm_px` raised by the safety offset: the surface goal.
    pub surface_goal_px: Vector2<f64>,
    pub tip_oct_px: Vector2<f64>,
    pub tip_rgb_px: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowState {
    pub phase: Phase,
    /// Phase to resume once perception recovers.
    pub hold_resume: Option<Phase>,
    pub goal_ilm_px: Option<Vector2<f64>>,
    pub goal_subretinal_px: Option<Vector2<f64>>,
    pub insertion_distance: f64,
    pub insertion_remaining: f64,
    pub cfg: WorkflowConfig,
    pub arrival: Option<SurfaceArrival>,
    /// Latest valid B-scan tip and base, used to vet the subretinal click.
    pub last_tip_oct: Option<Vector2<f64>>,
    pub last_base_oct: Option<Vector2<f64>>,
}

impl WorkflowState {
    pub fn new(cfg: WorkflowConfig) -> Self {
        Self {
            phase: Phase::AwaitIlmGoal,
            hold_resume: None,
            goal_ilm_px: None,
            goal_subretinal_px: None,
            insertion_distance: 0.0,
            insertion_remaining: 0.0,
            cfg,
            arrival: None,
            last_tip_oct: None,
            last_base_oct: None,
        }
    }

    /// The phase the controller is effectively working on.
    pub fn active_phase(&self) -> Phase {
        match self.phase {
            Phase::Hold => self.hold_resume.unwrap_or(Phase::Hold),
            p => p,
        }
    }

    fn wrong_phase(&self, action: &'static str) -> Error {
        Error::WrongPhase {
            action,
            phase: self.phase.to_string(),
        }
    }
}

/// Accept the microscope goal click.
pub fn apply_ilm_goal(wf: &mut WorkflowState, goal_px: Vector2<f64>) -> Result<()> {
    if wf.phase != Phase::AwaitIlmGoal {
        return Err(wf.wrong_phase("click_ilm_goal"));
    }
    if !goal_px.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidDetection("goal pixel not finite"));
    }
    wf.goal_ilm_px = Some(goal_px);
    wf.phase = Phase::AlignXy;
    Ok(())
}

/// Accept the B-scan goal click, fixing the insertion distance.
pub fn apply_subretinal_goal(wf: &mut WorkflowState, goal_px: Vector2<f64>) -> Result<f64> {
    if wf.phase != Phase::AwaitSubretinalGoal {
        return Err(wf.wrong_phase("click_subretinal_goal"));
    }
    let (tip, base) = match (wf.last_tip_oct, wf.last_base_oct) {
        (Some(t), Some(b)) => (t, b),
        _ => return Err(Error::InvalidDetection("no B-scan tip to insert from")),
    };
    let advance = scaled(&(tip - base));
    let along = scaled(&(goal_px - tip)).dot(&advance.normalize());
    if along < -1e-9 {
        return Err(Error::GoalAboveTip);
    }
    let d = compute_insertion_distance(&goal_px, &tip);
    wf.goal_subretinal_px = Some(goal_px);
    wf.insertion_distance = d;
    wf.insertion_remaining = d;
    wf.phase = Phase::Insert;
    Ok(d)
}

/// B-scan pixel offset in µm.
fn scaled(d: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(d.x * units::BSCAN_UM_PER_COL, d.y * units::BSCAN_UM_PER_ROW)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MotionCommand {
    Hold,
    /// Planar tip displacement, µm; Z unchanged.
    Planar { delta: Vector2<f64> },
    /// Vertical tip displacement, µm; XY unchanged.
    Vertical { dz: f64 },
    /// Move to `depth` µm along the insertion line fixed at INSERT entry.
    Advance { step: f64, depth: f64 },
}

impl MotionCommand {
    /// Commanded tip displacement from encoder position `p`, given the
    /// insertion line when advancing.
    pub fn target(&self, p: &Vector3<f64>, insertion: Option<(&Vector3<f64>, &Vector3<f64>)>) -> Vector3<f64> {
        match self {
            MotionCommand::Hold => *p,
            MotionCommand::Planar { delta } => p + Vector3::new(delta.x, delta.y, 0.0),
            MotionCommand::Vertical { dz } => p + Vector3::new(0.0, 0.0, *dz),
            MotionCommand::Advance { depth, .. } => match insertion {
                Some((origin, dir)) => origin + dir * *depth,
                None => *p,
            },
        }
    }

    pub fn is_motion(&self) -> bool {
        !matches!(self, MotionCommand::Hold)
    }
}

/// One controller input: perception of the current tick plus the encoder
/// tip position.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub perception: &'a PerceptionResult,
    pub p: Vector3<f64>,
}

/// Rows between the tip and the surface goal, converted to µm; positive
/// while the tip is still above the goal.
pub fn surface_gap_um(tip_row: f64, surface_goal_row: f64) -> f64 {
    (surface_goal_row - tip_row) * units::BSCAN_UM_PER_ROW
}

/// Advance the workflow by one controller decision.
pub fn step_workflow(wf: &mut WorkflowState, servo: &mut ServoState, obs: &Observation<'_>) -> MotionCommand {
    let p = obs.perception;
    if let (Some(t), Some(b)) = (p.tip_oct, p.base_oct) {
        wf.last_tip_oct = Some(t);
        wf.last_base_oct = Some(b);
    }
    // A transition can hand over to a phase that acts on the same
    // observation; bound the chain so a cycle cannot spin.
    for hop in 0..4 {
        if wf.phase == Phase::Hold {
            let resume = wf.hold_resume.unwrap_or(Phase::AlignXy);
            if !resume.perception_ok(p) {
                return MotionCommand::Hold;
            }
            wf.phase = resume;
            wf.hold_resume = None;
        }
        if !wf.phase.perception_ok(p) {
            if hop > 0 {
                // Entered this tick; its sensor data is simply not in yet.
                return MotionCommand::Hold;
            }
            wf.hold_resume = Some(wf.phase);
            wf.phase = Phase::Hold;
            return MotionCommand::Hold;
        }
        match phase_step(wf, servo, obs) {
            Some(cmd) => return cmd,
            None => continue,
        }
    }
    MotionCommand::Hold
}

/// `None` signals a transition whose new phase should act now.
fn phase_step(wf: &mut WorkflowState, servo: &mut ServoState, obs: &Observation<'_>) -> Option<MotionCommand> {
    let p = obs.perception;
    let p_bar = obs.p.xy();
    match wf.phase {
        Phase::AwaitIlmGoal | Phase::AwaitSubretinalGoal | Phase::Done | Phase::Hold => Some(MotionCommand::Hold),
        Phase::AlignXy => {
            let tip = p.tip_rgb.expect("checked");
            let goal = wf.goal_ilm_px.expect("ALIGN_XY entered with a goal");
            let cmd = align_step(wf, servo, tip, goal, p_bar);
            if wf.phase == Phase::LowerZ {
                return None;
            }
            Some(cmd)
        }
        Phase::LowerZ => {
            let tip = p.tip_rgb.expect("checked");
            let goal = wf.goal_ilm_px.expect("LOWER_Z entered with a goal");
            if (goal - tip).norm() > wf.cfg.realign_threshold_px {
                wf.phase = Phase::AlignXy;
                return None;
            }
            // Vertical motion shifts the tip pixel slightly through the
            // camera tilt; keep it out of the Broyden deltas.
            servo.set_reference(tip, p_bar);
            let tip_oct = p.tip_oct.expect("checked");
            let profile = p.ilm_profile.as_ref().expect("checked");
            let Some(ilm_row) = profile_row_at(profile, tip_oct.x) else {
                wf.hold_resume = Some(Phase::LowerZ);
                wf.phase = Phase::Hold;
                return Some(MotionCommand::Hold);
            };
            let goal_row = ilm_row - wf.cfg.safety_offset_um / units::BSCAN_UM_PER_ROW;
            let gap = surface_gap_um(tip_oct.y, goal_row);
            if gap <= wf.cfg.surface_band_um {
                wf.arrival = Some(SurfaceArrival {
                    ilm_px: Vector2::new(tip_oct.x, ilm_row),
                    surface_goal_px: Vector2::new(tip_oct.x, goal_row),
                    tip_oct_px: tip_oct,
                    tip_rgb_px: tip,
                });
                wf.phase = Phase::AtSurface;
                return None;
            }
            let step = if gap > wf.cfg.z_fine_zone_um {
                wf.cfg.z_step_um.min(gap - wf.cfg.z_fine_zone_um).max(wf.cfg.z_fine_step_um)
            } else {
                wf.cfg.z_fine_step_um.min(gap - wf.cfg.surface_band_um / 2.0)
            };
            Some(MotionCommand::Vertical { dz: -step })
        }
        Phase::AtSurface => {
            wf.phase = Phase::AwaitSubretinalGoal;
            Some(MotionCommand::Hold)
        }
        Phase::Insert => {
            if wf.goal_subretinal_px.is_none() {
                // Unreachable through the public transitions.
                wf.phase = Phase::AwaitSubretinalGoal;
                return Some(MotionCommand::Hold);
            }
            if wf.insertion_remaining <= 0.0 {
                wf.insertion_remaining = 0.0;
                wf.phase = Phase::Done;
                return Some(MotionCommand::Hold);
            }
            let step = wf.cfg.insert_step_um.min(wf.insertion_remaining);
            wf.insertion_remaining = (wf.insertion_remaining - step).max(0.0);
            let depth = wf.insertion_distance - wf.insertion_remaining;
            Some(MotionCommand::Advance { step, depth })
        }
    }
}

fn align_step(
    wf: &mut WorkflowState,
    servo: &mut ServoState,
    tip: Vector2<f64>,
    goal: Vector2<f64>,
    p_bar: Vector2<f64>,
) -> MotionCommand {
    match servo.bootstrap {
        Bootstrap::Pending(n) => {
            servo.set_reference(tip, p_bar);
            servo.bootstrap = Bootstrap::Probing(n);
            return MotionCommand::Planar {
                delta: probe_direction(n) * servo.probe_step_um,
            };
        }
        Bootstrap::Probing(n) => {
            if let Some((di, dp)) = servo.deltas(&tip, &p_bar) {
                if let Ok(next) = broyden_update(servo, &di, &dp) {
                    *servo = next;
                }
            }
            servo.set_reference(tip, p_bar);
            servo.bootstrap = if n == 0 { Bootstrap::Pending(1) } else { Bootstrap::Done };
            if servo.bootstrap != Bootstrap::Done {
                return align_step(wf, servo, tip, goal, p_bar);
            }
        }
        Bootstrap::Done => {
            match servo.deltas(&tip, &p_bar) {
                Some((di, dp)) if should_update(servo, &di, &dp) => {
                    if let Ok(next) = broyden_update(servo, &di, &dp) {
                        *servo = next;
                    }
                    servo.set_reference(tip, p_bar);
                }
                Some(_) => {}
                None => servo.set_reference(tip, p_bar),
            }
        }
    }

    if (goal - tip).norm() <= wf.cfg.realign_threshold_px {
        wf.phase = Phase::LowerZ;
        return MotionCommand::Hold;
    }
    match desired_planar_motion(servo, &goal, &tip) {
        Ok(dp) => MotionCommand::Planar {
            delta: clamp_norm(dp, servo.max_planar_step_um),
        },
        Err(_) => {
            servo.reinitialise();
            wf.hold_resume = Some(Phase::AlignXy);
            wf.phase = Phase::Hold;
            MotionCommand::Hold
        }
    }
}

fn probe_direction(n: u8) -> Vector2<f64> {
    if n == 0 {
        Vector2::x()
    } else {
        Vector2::y()
    }
}

/// Outcome of [`simulate_planar_servo`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarServoRun {
    /// Control steps taken until the pixel error first reached the
    /// threshold, or `None` if it never did.
    pub converged_at: Option<usize>,
    pub final_error_px: f64,
    pub errors_px: Vec<f64>,
    pub j: Matrix2<f64>,
}

/// Closed-loop planar servoing against an arbitrary robot-to-image map:
/// bootstrap probes, then capped goal-directed steps with thresholded
/// Broyden updates, one observation per step.
pub fn simulate_planar_servo<F>(
    camera: F,
    cfg: &ServoConfig,
    start_um: Vector2<f64>,
    goal_px: Vector2<f64>,
    threshold_px: f64,
    max_steps: usize,
) -> PlanarServoRun
where
    F: Fn(&Vector2<f64>) -> Vector2<f64>,
{
    let mut servo = ServoState::new(cfg);
    let mut wf = WorkflowState::new(WorkflowConfig {
        realign_threshold_px: threshold_px,
        ..Default::default()
    });
    wf.goal_ilm_px = Some(goal_px);
    let mut p = start_um;
    let mut errors = Vec::with_capacity(max_steps + 1);
    let mut converged_at = None;
    for step in 0..=max_steps {
        let tip = camera(&p);
        let err = (goal_px - tip).norm();
        errors.push(err);
        if err <= threshold_px && servo.is_bootstrapped() {
            converged_at = Some(step);
            break;
        }
        if step == max_steps {
            break;
        }
        wf.phase = Phase::AlignXy;
        if let MotionCommand::Planar { delta } = align_step(&mut wf, &mut servo, tip, goal_px, p) {
            p += delta;
        }
    }
    PlanarServoRun {
        converged_at,
        final_error_px: *errors.last().unwrap_or(&f64::NAN),
        errors_px: errors,
        j: servo.j,
    }
}
