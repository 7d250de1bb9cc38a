use oct_servo::imaging::RenderMode;
use oct_servo::metrics::{AbortCause, TrialRecord, TrialStatus};
use oct_servo::robot::ActuationNoise;
use oct_servo::servo::Phase;
use oct_servo::trial::{replay, run_batch, write_batch, Click, GoalMode, Session, TrialConfig};
use oct_servo::Error;

fn flat_quiet() -> TrialConfig {
    let mut cfg = TrialConfig::default();
    cfg.phantom.bump_amplitude_um = 0.0;
    cfg.phantom.bump_count = 0;
    cfg.actuation = ActuationNoise::default();
    cfg
}

#[test]
fn flat_noise_free_trial_completes() {
    let rec = Session::new(&flat_quiet(), 0).unwrap().run();
    assert_eq!(rec.status, TrialStatus::Done);
    let m = rec.metrics.unwrap();
    assert!(m.nav_error_2d_um.unwrap() <= 13.6);
    let clearance = m.surface_clearance_um.unwrap();
    assert!((30.0..=35.0).contains(&clearance), "{clearance}");
    assert!(m.ade_um.unwrap() <= 1e-6);
    assert!(rec.insertion.unwrap().volume.is_some());
}

#[test]
fn full_dropout_aborts_on_perception() {
    let mut cfg = flat_quiet();
    cfg.perception.dropout_rate = 1.0;
    let rec = Session::new(&cfg, 0).unwrap().run();
    match rec.status {
        TrialStatus::Aborted { cause, phase, .. } => {
            assert_eq!(cause, AbortCause::Perception);
            assert_eq!(phase, Phase::AlignXy);
        }
        s => panic!("expected abort, got {s:?}"),
    }
    let end = rec.ticks.last().unwrap().time;
    assert!(end > 6.0 && end < 6.2, "{end}");
}

#[test]
fn same_seed_same_record() {
    let cfg = TrialConfig::default();
    let a = Session::new(&cfg, 4).unwrap().run().to_json().unwrap();
    let b = Session::new(&cfg, 4).unwrap().run().to_json().unwrap();
    assert_eq!(a, b);
    let c = Session::new(&cfg, 5).unwrap().run().to_json().unwrap();
    assert_ne!(a, c);
}

#[test]
fn replay_reproduces_live_frames() {
    let cfg = TrialConfig::default();
    let mut s = Session::new(&cfg, 1).unwrap();
    s.keep_frames(true);
    while !s.is_finished() {
        s.step();
    }
    let live = s.live_frames().to_vec();
    let rec = s.into_record();
    let out = replay(&rec, RenderMode::Annotations).unwrap();
    assert!(out.warnings.is_empty());
    assert_eq!(out.frames.len(), live.len());
    assert!(out.frames == live);
}

#[test]
fn truncated_record_warns_and_version_is_checked() {
    let mut rec = Session::new(&flat_quiet(), 0).unwrap().run();
    rec.frames.truncate(10);
    let out = replay(&rec, RenderMode::Annotations).unwrap();
    assert_eq!(out.frames.len(), 10);
    assert_eq!(out.warnings.len(), 1);

    let mut v: serde_json::Value = serde_json::from_str(&rec.to_json().unwrap()).unwrap();
    v["format_version"] = 99.into();
    match TrialRecord::from_json(&v.to_string()) {
        Err(Error::VersionMismatch { found: 99, .. }) => {}
        r => panic!("unexpected {r:?}"),
    }
}

#[test]
fn interactive_clicks_drive_the_workflow() {
    let mut cfg = flat_quiet();
    cfg.goals.mode = GoalMode::Interactive;
    let mut s = Session::new(&cfg, 2).unwrap();
    for _ in 0..50 {
        s.step();
    }
    assert_eq!(s.phase(), Phase::AwaitIlmGoal);
    assert!(s.apply_click(Click::SubretinalGoal { x: 10.0, y: 10.0 }).is_err());
    assert!(s.apply_click(Click::IlmGoal { x: -5.0, y: 10.0 }).is_err());

    let tip = s.latest_microscope().unwrap().annotations.tip_px;
    let ack = s.apply_click(Click::IlmGoal { x: tip.x + 30.0, y: tip.y - 20.0 }).unwrap();
    assert_eq!(ack.phase, Phase::AlignXy);
    assert!(s.apply_click(Click::IlmGoal { x: 1.0, y: 1.0 }).is_err());

    while s.phase() != Phase::AwaitSubretinalGoal && !s.is_finished() {
        s.step();
    }
    assert_eq!(s.phase(), Phase::AwaitSubretinalGoal);
    // Wait for a B-scan captured at rest.
    for _ in 0..20 {
        s.step();
    }
    let tip = s.latest_bscan().unwrap().annotations.tip_px.unwrap();
    let ack = s.apply_click(Click::SubretinalGoal { x: tip.x - 10.0, y: tip.y + 50.0 }).unwrap();
    assert_eq!(ack.phase, Phase::Insert);
    let d = ack.insertion_distance_um.unwrap();
    assert!((d - (53.0f64.powi(2) + 130.0f64.powi(2)).sqrt()).abs() < 25.0, "{d}");
    while !s.is_finished() {
        s.step();
    }
    assert_eq!(s.status(), Some(&TrialStatus::Done));
}

#[test]
fn batch_is_ordered_and_written() {
    let cfg = TrialConfig {
        trials: 4,
        trials_per_phantom: 2,
        ..Default::default()
    };
    let a = run_batch(&cfg).unwrap();
    let b = run_batch(&cfg).unwrap();
    assert_eq!(a.hash, b.hash);
    assert_eq!(a.records.iter().map(|r| r.trial_index).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    let dir = tempfile::tempdir().unwrap();
    write_batch(&a, dir.path()).unwrap();
    for f in ["aggregate.csv", "summary.json", "config.toml", "trials/trial_003.json", "traces/trial_000.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = TrialRecord::from_json(&std::fs::read_to_string(dir.path().join("trials/trial_002.json")).unwrap()).unwrap();
    assert_eq!(back, a.records[2]);
}
