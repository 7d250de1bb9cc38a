//! Tool kinematics under a remote center of motion.
//!
//! Joint space is abstracted away: the simulator commands the tip position
//! directly and derives the shaft orientation so the shaft always passes
//! through the scleral pivot. Motions are straight tip paths with a
//! trapezoidal speed profile sampled at the control rate.

use std::io::Write;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::ToolPose;
use crate::rng::SimRng;

pub const CONTROL_RATE_HZ: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcmConstraint {
    pub pivot: Vector3<f64>,
    /// Allowed pivot-to-shaft distance, µm.
    pub tolerance: f64,
}

impl RcmConstraint {
    pub fn new(pivot: Vector3<f64>, tolerance: f64) -> Result<Self> {
        if !(tolerance > 0.0) {
            return Err(Error::InvalidConfig("RCM tolerance must be positive".into()));
        }
        Ok(Self { pivot, tolerance })
    }

    pub fn with_default_tolerance(pivot: Vector3<f64>) -> Self {
        Self { pivot, tolerance: 10.0 }
    }

    pub fn satisfied_by(&self, pose: &ToolPose) -> bool {
        rcm_error(pose, self) <= self.tolerance
    }
}

/// Pose whose shaft runs from `tip` through the pivot.
pub fn pose_for_tip(tip: &Vector3<f64>, rcm: &RcmConstraint, frame_id: u64) -> Result<ToolPose> {
    let axis = (rcm.pivot - tip).try_normalize(1e-9).ok_or(Error::TipAtPivot)?;
    ToolPose::new(*tip, axis, frame_id)
}

/// Perpendicular distance from the pivot to the shaft line.
pub fn rcm_error(pose: &ToolPose, rcm: &RcmConstraint) -> f64 {
    let rel = rcm.pivot - pose.tip;
    (rel - pose.axis * rel.dot(&pose.axis)).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionLimits {
    /// µm/s
    pub max_speed: f64,
    /// µm/s²
    pub max_accel: f64,
    pub control_rate_hz: f64,
    /// Closest the tip may come to the pivot, µm.
    pub min_pivot_distance: f64,
}

impl Default for MotionLimits {
    fn default() -> Self {
        Self {
            max_speed: 1000.0,
            max_accel: 10_000.0,
            control_rate_hz: CONTROL_RATE_HZ,
            min_pivot_distance: 500.0,
        }
    }
}

impl MotionLimits {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_speed", self.max_speed),
            ("max_accel", self.max_accel),
            ("control_rate_hz", self.control_rate_hz),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.control_rate_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub pose: ToolPose,
    /// Seconds since segment start.
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySegment {
    /// Waypoint 0 is the start pose; one waypoint per control period after.
    pub waypoints: Vec<Waypoint>,
    pub max_speed: f64,
}

impl TrajectorySegment {
    pub fn duration(&self) -> f64 {
        self.waypoints.last().map_or(0.0, |w| w.time)
    }

    pub fn final_tip(&self) -> Vector3<f64> {
        self.waypoints.last().expect("segment has a start waypoint").pose.tip
    }

    /// Tip speed between consecutive waypoints.
    pub fn speeds(&self) -> impl Iterator<Item = f64> + '_ {
        self.waypoints
            .windows(2)
            .map(|w| (w[1].pose.tip - w[0].pose.tip).norm() / (w[1].time - w[0].time))
    }
}

/// Distance covered after `t` seconds of a rest-to-rest trapezoidal profile
/// over `length`, returning the profile duration as well.
fn trapezoid(length: f64, v: f64, a: f64) -> (f64, impl Fn(f64) -> f64) {
    let t_acc_full = v / a;
    let d_acc_full = 0.5 * a * t_acc_full * t_acc_full;
    let (t_acc, v_peak, t_cruise) = if 2.0 * d_acc_full >= length {
        let t = (length / a).sqrt();
        (t, a * t, 0.0)
    } else {
        (t_acc_full, v, (length - 2.0 * d_acc_full) / v)
    };
    let total = 2.0 * t_acc + t_cruise;
    let d_acc = 0.5 * a * t_acc * t_acc;
    let s = move |t: f64| {
        if t <= 0.0 {
            0.0
        } else if t < t_acc {
            0.5 * a * t * t
        } else if t < t_acc + t_cruise {
            d_acc + v_peak * (t - t_acc)
        } else if t < total {
            let r = total - t;
            length - 0.5 * a * r * r
        } else {
            length
        }
    };
    (total, s)
}

/// Straight tip path from `current` to `target_tip`, every waypoint
/// oriented through the pivot.
pub fn plan_trajectory(
    current: &ToolPose,
    target_tip: &Vector3<f64>,
    rcm: &RcmConstraint,
    limits: &MotionLimits,
) -> Result<TrajectorySegment> {
    limits.validate()?;
    if (target_tip - rcm.pivot).norm() < limits.min_pivot_distance {
        return Err(Error::Infeasible(format!(
            "target within {} µm of the pivot",
            limits.min_pivot_distance
        )));
    }
    let start = current.tip;
    let delta = target_tip - start;
    let length = delta.norm();
    let mut waypoints = vec![Waypoint {
        pose: pose_for_tip(&start, rcm, current.frame_id)?,
        time: 0.0,
    }];
    if length > 0.0 {
        let dir = delta / length;
        let (total, s) = trapezoid(length, limits.max_speed, limits.max_accel);
        let dt = limits.period();
        let n = (total / dt).ceil().max(1.0) as usize;
        for k in 1..=n {
            let t = k as f64 * dt;
            let tip = if k == n { *target_tip } else { start + dir * s(t) };
            waypoints.push(Waypoint {
                pose: pose_for_tip(&tip, rcm, current.frame_id)?,
                time: t,
            });
        }
    }
    Ok(TrajectorySegment {
        waypoints,
        max_speed: limits.max_speed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ActuationNoise {
    /// Std-dev of the lateral landing offset per segment, µm.
    pub sigma_um: f64,
    /// Offsets are clipped to this many standard deviations.
    pub clip_sigmas: f64,
}

impl ActuationNoise {
    pub fn new(sigma_um: f64) -> Self {
        Self {
            sigma_um,
            clip_sigmas: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_um >= 0.0) || !(self.clip_sigmas >= 0.0) {
            return Err(Error::InvalidConfig("actuation noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Lateral (robot XY) landing offset.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        if self.sigma_um <= 0.0 {
            return Vector3::zeros();
        }
        let n = Normal::new(0.0, self.sigma_um).expect("validated sigma");
        let v = Vector2::new(n.sample(rng), n.sample(rng));
        let cap = self.clip_sigmas * self.sigma_um;
        let v = if v.norm() > cap { v * (cap / v.norm()) } else { v };
        Vector3::new(v.x, v.y, 0.0)
    }
}

/// The executing robot: owns the tool state and applies one waypoint per
/// control tick. A landing offset drawn per segment is blended in linearly
/// along the segment, so the tip path stays continuous.
#[derive(Debug, Clone)]
pub struct RobotSim {
    pub rcm: RcmConstraint,
    pub limits: MotionLimits,
    pub noise: ActuationNoise,
    tool: ToolPose,
    active: Option<ActiveSegment>,
    rng: SimRng,
}

#[derive(Debug, Clone)]
struct ActiveSegment {
    segment: TrajectorySegment,
    next: usize,
    start_offset: Vector3<f64>,
    landing_offset: Vector3<f64>,
}

impl RobotSim {
    pub fn new(tool: ToolPose, rcm: RcmConstraint, limits: MotionLimits, noise: ActuationNoise, rng: SimRng) -> Self {
        Self {
            rcm,
            limits,
            noise,
            tool,
            active: None,
            rng,
        }
    }

    /// Encoder reading of the current tool pose.
    pub fn tool(&self) -> &ToolPose {
        &self.tool
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_none()
    }

    /// Plan from the current pose to `target` and make it the active
    /// segment, replacing any segment in progress.
    pub fn command(&mut self, target: &Vector3<f64>) -> Result<&TrajectorySegment> {
        let segment = plan_trajectory(&self.tool, target, &self.rcm, &self.limits)?;
        self.submit(segment);
        Ok(&self.active.as_ref().expect("just submitted").segment)
    }

    /// Replace the active segment. Waypoints of the old one not yet applied
    /// are dropped.
    pub fn submit(&mut self, segment: TrajectorySegment) {
        let landing_offset = self.noise.sample(&mut self.rng);
        // The segment is planned from the measured pose, so it starts with
        // no offset of its own.
        let start_offset = Vector3::zeros();
        if segment.waypoints.len() <= 1 {
            self.active = None;
            return;
        }
        self.active = Some(ActiveSegment {
            segment,
            next: 1,
            start_offset,
            landing_offset,
        });
    }

    pub fn preempt(&mut self) {
        self.active = None;
    }

    /// Apply the next waypoint, if any. Returns whether the tool moved.
    pub fn tick(&mut self, frame_id: u64) -> bool {
        let Some(active) = self.active.as_mut() else {
            self.tool.frame_id = frame_id;
            return false;
        };
        let n = active.segment.waypoints.len() - 1;
        let k = active.next;
        let wp = &active.segment.waypoints[k];
        let frac = k as f64 / n as f64;
        let offset = active.start_offset + (active.landing_offset - active.start_offset) * frac;
        self.tool = ToolPose {
            tip: wp.pose.tip + offset,
            axis: wp.pose.axis,
            frame_id,
        };
        active.next += 1;
        if active.next > n {
            self.active = None;
        }
        true
    }

    /// Run the active segment to completion.
    pub fn execute(&mut self, frame_id: &mut u64) -> Vec<ToolPose> {
        let mut out = Vec::new();
        while !self.is_idle() {
            *frame_id += 1;
            self.tick(*frame_id);
            out.push(self.tool);
        }
        out
    }
}

/// One row of the trajectory trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub tick: u64,
    pub time: f64,
    pub tip: Vector3<f64>,
    pub axis: Vector3<f64>,
    pub rcm_error: f64,
    pub phase: crate::servo::Phase,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "tick,time,tip_x,tip_y,tip_z,axis_x,axis_y,axis_z,rcm_error,phase")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.9},{:.9},{:.9},{:.6},{}",
            r.tick, r.time, r.tip.x, r.tip.y, r.tip.z, r.axis.x, r.axis.y, r.axis.z, r.rcm_error, r.phase
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng;

    fn rcm() -> RcmConstraint {
        RcmConstraint::with_default_tolerance(Vector3::new(0.0, 0.0, 1000.0))
    }

    #[test]
    fn vertical_tool_axis() {
        let p = pose_for_tip(&Vector3::zeros(), &rcm(), 0).unwrap();
        assert_eq!(p.axis, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(rcm_error(&p, &rcm()), 0.0);
    }

    #[test]
    fn oblique_tool_axis() {
        let p = pose_for_tip(&Vector3::new(1000.0, 0.0, 0.0), &rcm(), 0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p.axis - Vector3::new(-h, 0.0, h)).norm() < 1e-15);
        assert!(rcm_error(&p, &rcm()) < 1e-9);
    }

    #[test]
    fn tip_at_pivot_rejected() {
        assert!(matches!(
            pose_for_tip(&Vector3::new(0.0, 0.0, 1000.0), &rcm(), 0),
            Err(Error::TipAtPivot)
        ));
    }

    #[test]
    fn point_line_distance() {
        let pose = ToolPose::new(Vector3::zeros(), Vector3::z(), 0).unwrap();
        let c = RcmConstraint::with_default_tolerance(Vector3::new(10.0, 0.0, 5.0));
        assert!((rcm_error(&pose, &c) - 10.0).abs() < 1e-12);
        let slid = ToolPose::new(Vector3::new(0.0, 0.0, -300.0), Vector3::z(), 0).unwrap();
        assert!((rcm_error(&slid, &c) - 10.0).abs() < 1e-12);
        assert!(c.satisfied_by(&pose));
        let tight = RcmConstraint::new(c.pivot, 9.0).unwrap();
        assert!(!tight.satisfied_by(&pose));
        assert!(RcmConstraint::new(c.pivot, 0.0).is_err());
    }

    #[test]
    fn zero_length_plan() {
        let c = RcmConstraint::with_default_tolerance(Vector3::new(0.0, 0.0, 5000.0));
        let start = pose_for_tip(&Vector3::new(10.0, 20.0, 30.0), &c, 0).unwrap();
        let seg = plan_trajectory(&start, &start.tip, &c, &MotionLimits::default()).unwrap();
        assert_eq!(seg.waypoints.len(), 1);
        assert_eq!(seg.duration(), 0.0);
    }

    #[test]
    fn long_move_respects_limits() {
        let c = RcmConstraint::with_default_tolerance(Vector3::new(-6000.0, 0.0, 5000.0));
        let start = pose_for_tip(&Vector3::new(0.0, 0.0, 300.0), &c, 0).unwrap();
        let target = Vector3::new(500.0, 0.0, 300.0);
        let limits = MotionLimits::default();
        let seg = plan_trajectory(&start, &target, &c, &limits).unwrap();
        assert!(seg.duration() >= 0.5);
        let max_step = seg
            .waypoints
            .windows(2)
            .map(|w| (w[1].pose.tip - w[0].pose.tip).norm())
            .fold(0.0, f64::max);
        assert!(max_step <= 10.0 + 1e-9, "{max_step}");
        assert!(seg.speeds().all(|v| v <= limits.max_speed + 1e-9));
        assert!(seg.waypoints.iter().all(|w| rcm_error(&w.pose, &c) < 1e-9));
        assert_eq!(seg.final_tip(), target);
        // Path is straight.
        for w in &seg.waypoints {
            assert!((w.pose.tip.y).abs() < 1e-12 && (w.pose.tip.z - 300.0).abs() < 1e-12);
        }
    }

    #[test]
    fn target_near_pivot_infeasible() {
        let c = rcm();
        let start = pose_for_tip(&Vector3::zeros(), &c, 0).unwrap();
        assert!(matches!(
            plan_trajectory(&start, &Vector3::new(0.0, 0.0, 900.0), &c, &MotionLimits::default()),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn noise_free_execution_is_exact() {
        let c = RcmConstraint::with_default_tolerance(Vector3::new(-6000.0, -500.0, 5500.0));
        let start = pose_for_tip(&Vector3::new(0.0, 0.0, 400.0), &c, 0).unwrap();
        let mut robot = RobotSim::new(start, c, MotionLimits::default(), ActuationNoise::default(), substream(0, "robot", 0));
        let target = Vector3::new(37.0, -12.0, 380.0);
        robot.command(&target).unwrap();
        let mut frame = 0;
        let poses = robot.execute(&mut frame);
        assert!(!poses.is_empty());
        assert_eq!(robot.tool().tip, target);
        assert!(rcm_error(robot.tool(), &c) < 1e-9);
    }

    #[test]
    fn noisy_landing_error_is_bounded() {
        let c = RcmConstraint::with_default_tolerance(Vector3::new(-6000.0, -500.0, 5500.0));
        let mut robot = RobotSim::new(
            pose_for_tip(&Vector3::new(0.0, 0.0, 400.0), &c, 0).unwrap(),
            c,
            MotionLimits::default(),
            ActuationNoise::new(2.0),
            substream(11, "robot", 0),
        );
        let mut rng = substream(11, "targets", 0);
        let mut total = 0.0;
        let mut frame = 0;
        for _ in 0..1000 {
            let target = robot.tool().tip
                + Vector3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-10.0..10.0));
            robot.command(&target).unwrap();
            robot.execute(&mut frame);
            let err = (robot.tool().tip - target).norm();
            assert!(err <= 6.0 + 1e-9);
            assert!(rcm_error(robot.tool(), &c) <= 6.0 + 1e-9);
            total += err;
        }
        let mean = total / 1000.0;
        assert!(mean <= 6.0, "{mean}");
        // Rayleigh mean for sigma = 2 is about 2.5.
        assert!((mean - 2.0 * (std::f64::consts::PI / 2.0).sqrt()).abs() < 0.3, "{mean}");
    }

    #[test]
    fn preemption_drops_remaining_waypoints() {
        let c = RcmConstraint::with_default_tolerance(Vector3::new(-6000.0, -500.0, 5500.0));
        let start = pose_for_tip(&Vector3::new(0.0, 0.0, 400.0), &c, 0).unwrap();
        let mut robot = RobotSim::new(start, c, MotionLimits::default(), ActuationNoise::default(), substream(0, "robot", 0));
        let seg = robot.command(&Vector3::new(400.0, 0.0, 400.0)).unwrap().clone();
        for f in 1..=5 {
            robot.tick(f);
        }
        assert_eq!(robot.tool().tip, seg.waypoints[5].pose.tip);
        let at_preempt = robot.tool().tip;
        robot.command(&Vector3::new(at_preempt.x, 200.0, 400.0)).unwrap();
        let mut frame = 5;
        for pose in robot.execute(&mut frame) {
            // Nothing from the old segment beyond the preemption point.
            assert!((pose.tip.x - at_preempt.x).abs() < 1e-9);
        }
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let row = TraceRow {
            tick: 3,
            time: 0.03,
            tip: Vector3::new(1.0, 2.0, 3.0),
            axis: Vector3::z(),
            rcm_error: 0.5,
            phase: crate::servo::Phase::LowerZ,
        };
        let mut buf = Vec::new();
        write_trace_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("tick,time"));
        assert!(lines[1].ends_with("LOWER_Z"));
    }

    proptest! {
        #[test]
        fn plans_are_rcm_exact_and_speed_limited(
            sx in -800.0f64..800.0, sy in -800.0f64..800.0, sz in 0.0f64..800.0,
            dx in -300.0f64..300.0, dy in -300.0f64..300.0, dz in -300.0f64..300.0,
        ) {
            let c = RcmConstraint::with_default_tolerance(Vector3::new(-6000.0, -500.0, 5500.0));
            let start = pose_for_tip(&Vector3::new(sx, sy, sz), &c, 0).unwrap();
            let limits = MotionLimits::default();
            let seg = plan_trajectory(&start, &(start.tip + Vector3::new(dx, dy, dz)), &c, &limits).unwrap();
            for w in &seg.waypoints {
                prop_assert!(rcm_error(&w.pose, &c) < 1e-9);
            }
            for v in seg.speeds() {
                prop_assert!(v <= limits.max_speed + 1e-6);
            }
        }

        #[test]
        fn rcm_error_invariant_under_sliding(s in -2000.0f64..2000.0, x in -500.0f64..500.0) {
            let c = RcmConstraint::with_default_tolerance(Vector3::new(x, 40.0, 3000.0));
            let pose = ToolPose::new(Vector3::new(10.0, -20.0, 0.0), Vector3::new(0.1, 0.2, 1.0), 0).unwrap();
            let slid = ToolPose::new(pose.shaft_point(s), pose.axis, 0).unwrap();
            prop_assert!((rcm_error(&pose, &c) - rcm_error(&slid, &c)).abs() < 1e-8);
        }
    }
}
