//! Re-render a recorded trial frame by frame from its scene record.

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::galvo::GalvoCalibration;
use crate::imaging::{render_bscan, render_microscope, BScanFrame, MicroscopeFrame, RenderMode, Rig};
use crate::metrics::{FrameKind, FrameLog, TrialRecord};
use crate::phantom::{EyePhantom, SceneSnapshot};

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayFrame {
    Microscope(MicroscopeFrame),
    Bscan(BScanFrame),
}

impl ReplayFrame {
    pub fn timestamp(&self) -> f64 {
        match self {
            ReplayFrame::Microscope(f) => f.timestamp,
            ReplayFrame::Bscan(f) => f.timestamp,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOutput {
    pub frames: Vec<ReplayFrame>,
    pub warnings: Vec<String>,
}

pub(super) struct SceneFrames<'a> {
    pub phantom: &'a Arc<EyePhantom>,
    pub rig: &'a Rig,
    pub calibration: &'a GalvoCalibration,
    pub frames: &'a [FrameLog],
    pub mode: RenderMode,
}

pub(super) fn replay_range(src: &SceneFrames<'_>, range: Range<usize>) -> Result<Vec<ReplayFrame>> {
    src.frames[range]
        .iter()
        .map(|log| {
            let scene = SceneSnapshot::new(log.tool, src.phantom.clone(), log.time);
            Ok(match log.kind {
                FrameKind::Microscope => ReplayFrame::Microscope(render_microscope(&scene, &src.rig.camera, src.mode)),
                FrameKind::Bscan => {
                    let line = log
                        .scan_line
                        .ok_or(Error::MissingAnnotation("B-scan frame without a scan line"))?;
                    ReplayFrame::Bscan(render_bscan(&scene, &line, src.calibration, src.rig, src.mode)?)
                }
            })
        })
        .collect()
}

pub fn replay(rec: &TrialRecord, mode: RenderMode) -> Result<ReplayOutput> {
    let phantom = Arc::new(EyePhantom::generate(rec.scene.phantom_seed, &rec.scene.phantom)?);
    let mut warnings = Vec::new();
    if rec.frames.len() < rec.frame_count {
        warnings.push(format!(
            "record holds {} of {} frames; replaying the prefix",
            rec.frames.len(),
            rec.frame_count
        ));
    }
    let src = SceneFrames {
        phantom: &phantom,
        rig: &rec.scene.rig,
        calibration: &rec.scene.calibration,
        frames: &rec.frames,
        mode,
    };
    let frames = replay_range(&src, 0..rec.frames.len())?;
    Ok(ReplayOutput { frames, warnings })
}

pub fn replay_file(path: &Path, mode: RenderMode) -> Result<ReplayOutput> {
    let rec = TrialRecord::from_json(&std::fs::read_to_string(path)?)?;
    replay(&rec, mode)
}
