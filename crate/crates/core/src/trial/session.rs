//! One trial as a tick-based simulation.
//!
//! The control loop runs at the robot rate. The microscope and the B-scan
//! are captured on their own clocks. The controller looks, then moves: it
//! decides only while the robot is idle, and only on frames captured after
//! the last motion finished.

use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GoalMode, TrialConfig};
use crate::error::{Error, Result};
use crate::galvo::{acquire_viewing_card_samples, fit_calibration, GalvoCalibration, ScanLine};
use crate::imaging::{
    acquire_volume, locate_tip_in_volume, perceive_bscan, perceive_microscope, render_bscan, render_microscope,
    track_tool_scanline, BScanDetection, BScanFrame, BScanGeometry, CameraModel, MicroscopeDetection, MicroscopeFrame,
    PerceptionResult, Rig,
};
use crate::metrics::{
    compute_metrics, AbortCause, ArrivalRecord, CommandLog, FrameKind, FrameLog, InsertionRecord, PhaseSpan,
    SceneRecord, TickLog, TrialRecord, TrialStatus, VolumeResult, RECORD_FORMAT_VERSION,
};
use crate::phantom::{EyePhantom, SceneSnapshot, ToolPose};
use crate::rng::{substream, SimRng};
use crate::robot::{pose_for_tip, rcm_error, RcmConstraint, RobotSim};
use crate::servo::{
    apply_ilm_goal, apply_subretinal_goal, step_workflow, Observation, Phase, ServoState,
    WorkflowState,
};
use crate::units;

const CLOCK_EPS: f64 = 1e-9;

/// An operator goal click.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Click {
    IlmGoal { x: f64, y: f64 },
    SubretinalGoal { x: f64, y: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickAck {
    pub goal: Vector2<f64>,
    pub phase: Phase,
    /// Insertion distance fixed by a subretinal click, µm.
    pub insertion_distance_um: Option<f64>,
}

/// What happened during one tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TickEvents {
    pub microscope_frame: bool,
    pub bscan_frame: bool,
    pub phase_changed: bool,
    pub finished: bool,
}

#[derive(Debug, Clone, Copy)]
struct ScriptedGoals {
    ilm_goal_px: Vector2<f64>,
    subretinal_depth_um: f64,
}

#[derive(Debug, Clone, Copy)]
struct InsertionLine {
    origin: Vector3<f64>,
    direction: Vector3<f64>,
}

pub struct Session {
    cfg: TrialConfig,
    trial_index: usize,
    seed: u64,
    phantom_seed: u64,
    phantom: Arc<EyePhantom>,
    rig: Rig,
    calibration: GalvoCalibration,
    calibration_rms: f64,
    rcm: RcmConstraint,
    robot: RobotSim,
    servo: ServoState,
    wf: WorkflowState,
    perception_rng: SimRng,

    tick: u64,
    time: f64,
    ms_count: u64,
    bs_count: u64,
    ms_frame: Option<MicroscopeFrame>,
    bs_frame: Option<BScanFrame>,
    ms_det: Option<MicroscopeDetection>,
    bs_det: Option<BScanDetection>,
    last_line: Option<ScanLine>,
    bs_line_time: f64,
    idle_since: f64,
    last_decision_ms: Option<u64>,
    hold_since: Option<f64>,
    wait_since: f64,
    active_time: f64,

    span_phase: Phase,
    span_start: f64,
    phases: Vec<PhaseSpan>,
    ticks: Vec<TickLog>,
    commands: Vec<CommandLog>,
    frames: Vec<FrameLog>,
    keep_frames: bool,
    live_frames: Vec<super::ReplayFrame>,

    scripted: Option<ScriptedGoals>,
    arrival: Option<ArrivalRecord>,
    insertion_line: Option<InsertionLine>,
    insertion: Option<InsertionRecord>,
    status: Option<TrialStatus>,
}

impl Session {
    /// Build the scene for trial `index` of `cfg` and calibrate the galvo.
    pub fn new(cfg: &TrialConfig, index: usize) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.trial_seed(index);
        let phantom_seed = cfg.phantom_seed(index);
        let phantom = Arc::new(EyePhantom::generate(phantom_seed, &cfg.phantom)?);
        let rig = cfg.rig();

        let mut cal_rng = substream(seed, "calibration", 0);
        let samples = acquire_viewing_card_samples(&rig.galvo_truth, &cfg.viewing_card, &mut cal_rng)?;
        let calibration = fit_calibration(&samples)?;
        let calibration_rms = calibration.rms_residual(&samples);

        let mut start_rng = substream(seed, "start", 0);
        let r = cfg.goals.start_xy_radius_um * start_rng.random::<f64>().sqrt();
        let a = start_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let xy = Vector2::new(r * a.cos(), r * a.sin());
        let h = sample_range(&mut start_rng, cfg.goals.start_height_um);
        let tip = Vector3::new(xy.x, xy.y, phantom.ilm_height_at(&xy)? + h);
        let rcm = RcmConstraint::with_default_tolerance(phantom.rcm_point);
        let start = pose_for_tip(&tip, &rcm, 0)?;

        let scripted = match cfg.goals.mode {
            GoalMode::Interactive => None,
            GoalMode::Scripted => {
                let mut goal_rng = substream(seed, "goals", 0);
                let start_px = rig.camera.project(&tip);
                let d = sample_range(&mut goal_rng, cfg.goals.ilm_goal_distance_px);
                let a = goal_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let margin = 40.0;
                let goal = start_px + Vector2::new(a.cos(), a.sin()) * d;
                let goal = Vector2::new(
                    goal.x.clamp(margin, units::MICROSCOPE_WIDTH as f64 - margin),
                    goal.y.clamp(margin, units::MICROSCOPE_HEIGHT as f64 - margin),
                );
                Some(ScriptedGoals {
                    ilm_goal_px: goal,
                    subretinal_depth_um: sample_range(&mut goal_rng, cfg.goals.subretinal_depth_um),
                })
            }
        };

        let robot = RobotSim::new(start, rcm, cfg.limits, cfg.actuation, substream(seed, "actuation", 0));
        let mut session = Self {
            cfg: cfg.clone(),
            trial_index: index,
            seed,
            phantom_seed,
            phantom,
            rig,
            calibration,
            calibration_rms,
            rcm,
            robot,
            servo: ServoState::new(&cfg.servo),
            wf: WorkflowState::new(cfg.workflow),
            perception_rng: substream(seed, "perception", 0),
            tick: 0,
            time: 0.0,
            ms_count: 0,
            bs_count: 0,
            ms_frame: None,
            bs_frame: None,
            ms_det: None,
            bs_det: None,
            last_line: None,
            bs_line_time: f64::NEG_INFINITY,
            idle_since: 0.0,
            last_decision_ms: None,
            hold_since: None,
            wait_since: 0.0,
            active_time: 0.0,
            span_phase: Phase::AwaitIlmGoal,
            span_start: 0.0,
            phases: Vec::new(),
            ticks: Vec::new(),
            commands: Vec::new(),
            frames: Vec::new(),
            keep_frames: false,
            live_frames: Vec::new(),
            scripted,
            arrival: None,
            insertion_line: None,
            insertion: None,
            status: None,
        };
        session.log_tick();
        session.capture();
        Ok(session)
    }

    /// Keep every rendered frame in memory (for replay comparison and
    /// streaming).
    pub fn keep_frames(&mut self, keep: bool) {
        self.keep_frames = keep;
        if keep && self.live_frames.len() < self.frames.len() {
            let src = self.scene_frames();
            let done = self.live_frames.len();
            if let Ok(out) = super::replay::replay_range(&src, done..self.frames.len()) {
                self.live_frames.extend(out);
            }
        }
    }

    fn scene_frames(&self) -> super::replay::SceneFrames<'_> {
        super::replay::SceneFrames {
            phantom: &self.phantom,
            rig: &self.rig,
            calibration: &self.calibration,
            frames: &self.frames,
            mode: self.cfg.session.render_mode,
        }
    }

    pub fn live_frames(&self) -> &[super::ReplayFrame] {
        &self.live_frames
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    pub fn phase(&self) -> Phase {
        self.wf.phase
    }

    pub fn workflow(&self) -> &WorkflowState {
        &self.wf
    }

    pub fn servo(&self) -> &ServoState {
        &self.servo
    }

    pub fn tool(&self) -> &ToolPose {
        self.robot.tool()
    }

    pub fn rcm_error(&self) -> f64 {
        rcm_error(self.robot.tool(), &self.rcm)
    }

    pub fn phantom(&self) -> &Arc<EyePhantom> {
        &self.phantom
    }

    pub fn rig(&self) -> &Rig {
        &self.rig
    }

    pub fn calibration(&self) -> &GalvoCalibration {
        &self.calibration
    }

    pub fn latest_microscope(&self) -> Option<&MicroscopeFrame> {
        self.ms_frame.as_ref()
    }

    pub fn latest_bscan(&self) -> Option<&BScanFrame> {
        self.bs_frame.as_ref()
    }

    pub fn perception(&self) -> PerceptionResult {
        PerceptionResult::from_parts(self.ms_det.as_ref(), self.bs_det.as_ref())
    }

    /// Simulated time spent outside operator waits, s.
    pub fn active_time(&self) -> f64 {
        self.active_time
    }

    pub fn config(&self) -> &TrialConfig {
        &self.cfg
    }

    pub fn ticks(&self) -> &[TickLog] {
        &self.ticks
    }

    /// Closed phase spans so far; the current phase is still open.
    pub fn phases(&self) -> &[PhaseSpan] {
        &self.phases
    }

    pub fn is_finished(&self) -> bool {
        self.status.is_some()
    }

    pub fn status(&self) -> Option<&TrialStatus> {
        self.status.as_ref()
    }

    fn scene(&self) -> SceneSnapshot {
        SceneSnapshot::new(*self.robot.tool(), self.phantom.clone(), self.time)
    }

    /// Apply an operator click between ticks.
    pub fn apply_click(&mut self, click: Click) -> Result<ClickAck> {
        if self.is_finished() {
            return Err(Error::WrongPhase {
                action: click_name(&click),
                phase: self.wf.phase.to_string(),
            });
        }
        let ack = match click {
            Click::IlmGoal { x, y } => {
                let goal = Vector2::new(x, y);
                if !CameraModel::in_frame(&goal) {
                    return Err(Error::InvalidDetection("goal outside the microscope frame"));
                }
                apply_ilm_goal(&mut self.wf, goal)?;
                ClickAck {
                    goal,
                    phase: self.wf.phase,
                    insertion_distance_um: None,
                }
            }
            Click::SubretinalGoal { x, y } => {
                let goal = Vector2::new(x, y);
                if !(goal.x >= 0.0
                    && goal.y >= 0.0
                    && goal.x < units::BSCAN_COLUMNS as f64
                    && goal.y < units::BSCAN_ROWS as f64)
                {
                    return Err(Error::InvalidDetection("goal outside the B-scan"));
                }
                let line = self
                    .bs_frame
                    .as_ref()
                    .map(|f| f.scan_line)
                    .ok_or(Error::InvalidDetection("no B-scan acquired yet"))?;
                let d = apply_subretinal_goal(&mut self.wf, goal)?;
                let tool = *self.robot.tool();
                self.insertion_line = Some(InsertionLine {
                    origin: tool.tip,
                    direction: -tool.axis,
                });
                self.insertion = Some(InsertionRecord {
                    distance_um: d,
                    line_origin: tool.tip,
                    line_direction: -tool.axis,
                    trace: vec![tool.tip],
                    scan_line: line,
                    volume: None,
                });
                ClickAck {
                    goal,
                    phase: self.wf.phase,
                    insertion_distance_um: Some(d),
                }
            }
        };
        self.track_phase();
        Ok(ack)
    }

    /// Advance the simulation by one control period.
    pub fn step(&mut self) -> TickEvents {
        let mut ev = TickEvents::default();
        if self.is_finished() {
            ev.finished = true;
            return ev;
        }
        self.tick += 1;
        self.time = self.tick as f64 * self.cfg.limits.period();
        if !self.wf.phase.is_user_wait() {
            self.active_time += self.cfg.limits.period();
        }
        let was_moving = !self.robot.is_idle();
        self.robot.tick(self.tick);
        if was_moving && self.robot.is_idle() {
            self.idle_since = self.time;
        }
        self.log_tick();
        if matches!(self.wf.active_phase(), Phase::Insert | Phase::Done) {
            if let Some(ins) = self.insertion.as_mut() {
                if was_moving {
                    ins.trace.push(self.robot.tool().tip);
                }
            }
        }

        let (ms, bs) = self.capture();
        ev.microscope_frame = ms;
        ev.bscan_frame = bs;

        let before = self.wf.phase;
        if let Err(e) = self.scripted_clicks() {
            self.abort(AbortCause::Goal, e.to_string());
        }
        if !self.is_finished() {
            self.decide();
        }
        self.track_phase();
        ev.phase_changed = self.wf.phase != before;

        if !self.is_finished() {
            self.check_abort();
        }
        if !self.is_finished() && self.wf.phase == Phase::Done {
            self.finish_insertion();
        }
        ev.finished = self.is_finished();
        ev
    }

    /// Run until the trial ends and return its record.
    pub fn run(mut self) -> TrialRecord {
        while !self.is_finished() {
            self.step();
        }
        self.into_record()
    }

    fn log_tick(&mut self) {
        let tool = *self.robot.tool();
        self.ticks.push(TickLog {
            tick: self.tick,
            time: self.time,
            phase: self.wf.phase,
            tip: tool.tip,
            axis: tool.axis,
            rcm_error: rcm_error(&tool, &self.rcm),
            clearance_um: self.phantom.clearance(&tool.tip),
        });
    }

    /// Capture any frame whose clock has come due.
    fn capture(&mut self) -> (bool, bool) {
        let mut got_ms = false;
        let mut got_bs = false;
        let mode = self.cfg.session.render_mode;
        if self.time + CLOCK_EPS >= self.ms_count as f64 / units::MICROSCOPE_RATE_HZ {
            self.ms_count += 1;
            let scene = self.scene();
            let frame = render_microscope(&scene, &self.rig.camera, mode);
            let det = perceive_microscope(&frame, &self.cfg.perception, &mut self.perception_rng);
            self.frames.push(FrameLog {
                kind: FrameKind::Microscope,
                time: self.time,
                tool: scene.tool,
                scan_line: None,
            });
            if self.keep_frames {
                self.live_frames.push(super::ReplayFrame::Microscope(frame.clone()));
            }
            if det.tip.is_some() {
                let p = PerceptionResult::from_parts(Some(&det), None);
                if let Ok(line) = track_tool_scanline(&p, units::default_scan_length_px()) {
                    self.last_line = Some(line);
                    self.bs_line_time = self.time;
                }
            }
            self.ms_frame = Some(frame);
            self.ms_det = Some(det);
            got_ms = true;
        }
        if self.time + CLOCK_EPS >= self.bs_count as f64 / units::BSCAN_RATE_HZ {
            self.bs_count += 1;
            if let Some(line) = self.last_line {
                let scene = self.scene();
                match render_bscan(&scene, &line, &self.calibration, &self.rig, mode) {
                    Ok(frame) => {
                        let det = perceive_bscan(&frame, &self.cfg.perception, &mut self.perception_rng);
                        self.frames.push(FrameLog {
                            kind: FrameKind::Bscan,
                            time: self.time,
                            tool: scene.tool,
                            scan_line: Some(line),
                        });
                        if self.keep_frames {
                            self.live_frames.push(super::ReplayFrame::Bscan(frame.clone()));
                        }
                        self.bs_frame = Some(frame);
                        self.bs_det = Some(det);
                        got_bs = true;
                    }
                    Err(_) => self.bs_det = None,
                }
            }
        }
        (got_ms, got_bs)
    }

    fn bscan_fresh(&self) -> bool {
        self.bs_det.is_some()
            && self.bs_frame.as_ref().is_some_and(|f| f.timestamp + CLOCK_EPS >= self.idle_since)
            && self.bs_line_time + CLOCK_EPS >= self.idle_since
    }

    fn decide(&mut self) {
        if !self.robot.is_idle() {
            return;
        }
        let Some(ms) = self.ms_frame.as_ref() else { return };
        if ms.timestamp + CLOCK_EPS < self.idle_since || self.last_decision_ms == Some(self.ms_count) {
            return;
        }
        let ms_valid = self.ms_det.as_ref().is_some_and(|d| d.tip.is_some());
        let needs_bs = self.wf.active_phase().needs_bscan();
        let bs_fresh = self.bscan_fresh();
        if needs_bs && !bs_fresh && ms_valid {
            return;
        }
        self.last_decision_ms = Some(self.ms_count);

        let bs = if bs_fresh { self.bs_det.as_ref() } else { None };
        let perception = PerceptionResult::from_parts(self.ms_det.as_ref(), bs);
        let p = self.robot.tool().tip;
        let cmd = step_workflow(&mut self.wf, &mut self.servo, &Observation { perception: &perception, p });

        if self.wf.arrival.is_some() && self.arrival.is_none() {
            self.record_arrival();
        }
        if !cmd.is_motion() {
            return;
        }
        let line = self.insertion_line.map(|l| (l.origin, l.direction));
        let target = cmd.target(&p, line.as_ref().map(|(o, d)| (o, d)));
        self.commands.push(CommandLog {
            time: self.time,
            phase: self.wf.phase,
            command: cmd,
            from: p,
            target,
        });
        if let Err(e) = self.robot.command(&target) {
            self.abort(AbortCause::Motion, e.to_string());
        }
    }

    fn record_arrival(&mut self) {
        let Some(a) = self.wf.arrival else { return };
        let tool = *self.robot.tool();
        let tip_rgb_truth = self.rig.camera.project(&tool.tip);
        let tip_oct_truth = self
            .bs_frame
            .as_ref()
            .and_then(|f| BScanGeometry::new(&f.scan_line, &self.calibration, &self.rig).ok())
            .map(|g| g.image_of(&tool.tip, &self.rig).0)
            .unwrap_or(a.tip_oct_px);
        self.arrival = Some(ArrivalRecord {
            time: self.time,
            tip_rgb_truth,
            tip_oct_truth,
            ilm_px: a.ilm_px,
            surface_goal_px: a.surface_goal_px,
            tip_world: tool.tip,
            clearance_um: self.phantom.clearance(&tool.tip),
        });
    }

    fn scripted_clicks(&mut self) -> Result<()> {
        let Some(script) = self.scripted else { return Ok(()) };
        let delay = self.cfg.goals.click_delay_s;
        if self.time + CLOCK_EPS < self.wait_since + delay {
            return Ok(());
        }
        match self.wf.phase {
            Phase::AwaitIlmGoal => {
                let g = script.ilm_goal_px;
                self.apply_click(Click::IlmGoal { x: g.x, y: g.y })?;
            }
            Phase::AwaitSubretinalGoal => {
                if !self.bscan_fresh() {
                    return Ok(());
                }
                let goal = self.scripted_subretinal_goal(script.subretinal_depth_um)?;
                self.apply_click(Click::SubretinalGoal { x: goal.x, y: goal.y })?;
            }
            _ => {}
        }
        Ok(())
    }

    /// The B-scan pixel of the point on the tool axis `depth` µm below the
    /// ILM, rounded to a whole pixel as a click would be.
    fn scripted_subretinal_goal(&self, depth: f64) -> Result<Vector2<f64>> {
        let frame = self.bs_frame.as_ref().ok_or(Error::InvalidDetection("no B-scan"))?;
        let tool = *self.robot.tool();
        let dir = -tool.axis;
        let mut s = 0.0;
        for _ in 0..20 {
            let q = tool.tip + dir * s;
            let target_z = self.phantom.ilm_height_unchecked(&q.xy()) - depth;
            let ds = (q.z - target_z) / -dir.z;
            s += ds;
            if ds.abs() < 1e-9 {
                break;
            }
        }
        let q = tool.tip + dir * s;
        let geom = BScanGeometry::new(&frame.scan_line, &self.calibration, &self.rig)?;
        let (px, _) = geom.image_of(&q, &self.rig);
        Ok(Vector2::new(px.x.round(), px.y.round()))
    }

    fn track_phase(&mut self) {
        let phase = self.wf.phase;
        if phase != self.span_phase {
            self.phases.push(PhaseSpan {
                phase: self.span_phase,
                start: self.span_start,
                end: self.time,
            });
            self.span_phase = phase;
            self.span_start = self.time;
            if phase.is_user_wait() {
                self.wait_since = self.time;
            }
        }
    }

    fn check_abort(&mut self) {
        if self.wf.phase == Phase::Hold {
            let since = *self.hold_since.get_or_insert(self.time);
            if self.time - since > self.cfg.session.hold_timeout_s + CLOCK_EPS {
                self.abort(AbortCause::Perception, format!("held for more than {} s", self.cfg.session.hold_timeout_s));
                return;
            }
        } else {
            self.hold_since = None;
        }
        if self.active_time > self.cfg.session.trial_timeout_s + CLOCK_EPS {
            self.abort(AbortCause::Timeout, format!("exceeded {} s", self.cfg.session.trial_timeout_s));
        }
    }

    fn abort(&mut self, cause: AbortCause, detail: String) {
        self.robot.preempt();
        self.status = Some(TrialStatus::Aborted {
            phase: self.wf.active_phase(),
            cause,
            detail,
        });
    }

    fn finish_insertion(&mut self) {
        if let Some(ins) = self.insertion.as_mut() {
            let scene = SceneSnapshot::new(*self.robot.tool(), self.phantom.clone(), self.time);
            let n = self.cfg.session.volume_slices;
            ins.volume = acquire_volume(&scene, &ins.scan_line, &self.calibration, &self.rig, n, self.cfg.session.volume_spacing_px)
                .ok()
                .and_then(|vol| locate_tip_in_volume(&vol))
                .map(|(actual_slice, landed_tip_px)| VolumeResult {
                    n_slices: n,
                    gt_slice: n / 2,
                    actual_slice,
                    landed_tip_px,
                });
        }
        self.status = Some(TrialStatus::Done);
    }

    /// Close the timeline and assemble the trial record.
    pub fn into_record(self) -> TrialRecord {
        self.record()
    }

    /// Metrics of the trial as it stands.
    pub fn final_metrics(&self) -> Option<crate::metrics::TrialMetrics> {
        self.record().metrics
    }

    fn record(&self) -> TrialRecord {
        let mut phases = self.phases.clone();
        phases.push(PhaseSpan {
            phase: self.span_phase,
            start: self.span_start,
            end: self.time,
        });
        let status = self.status.clone().unwrap_or(TrialStatus::Aborted {
            phase: self.wf.active_phase(),
            cause: AbortCause::Timeout,
            detail: "session ended early".into(),
        });
        let mut rec = TrialRecord {
            format_version: RECORD_FORMAT_VERSION,
            trial_index: self.trial_index,
            seed: self.seed,
            status,
            scene: SceneRecord {
                phantom_seed: self.phantom_seed,
                phantom: self.cfg.phantom,
                rig: self.rig,
                calibration: self.calibration,
                calibration_rms_px: self.calibration_rms,
            },
            goal_ilm_px: self.wf.goal_ilm_px,
            goal_subretinal_px: self.wf.goal_subretinal_px,
            arrival: self.arrival,
            insertion: self.insertion.clone(),
            phases,
            frame_count: self.frames.len(),
            ticks: self.ticks.clone(),
            commands: self.commands.clone(),
            frames: self.frames.clone(),
            metrics: None,
        };
        rec.metrics = Some(compute_metrics(&rec));
        rec
    }
}

fn click_name(c: &Click) -> &'static str {
    match c {
        Click::IlmGoal { .. } => "click_ilm_goal",
        Click::SubretinalGoal { .. } => "click_subretinal_goal",
    }
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}
