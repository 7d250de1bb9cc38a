//! Wire format.
//!
//! Every message is one JSON object on its own line (`\n` terminated,
//! UTF-8). Every object carries:
//!
//! | field      | type   | meaning                                      |
//! |------------|--------|----------------------------------------------|
//! | `kind`     | string | message kind, snake_case                     |
//! | `seq`      | u64    | strictly increasing per connection           |
//! | `sim_time` | f64    | simulated seconds at which it was produced   |
//!
//! Server to client:
//!
//! - `microscope_frame`: `frame_id`, `width`, `height`, `png` (base64 PNG,
//!   8-bit grey, or null when images are disabled), `annotations`
//!   (`tip_px`, `base_px` as `[x, y]`, `tool_visible`).
//! - `bscan_frame`: as above plus `scan_line` (`center`, `tangent`,
//!   `n_columns`); annotations hold `tip_px`, `base_px` (nullable
//!   `[column, row]`), `tip_offset_um`, `tip_normal_offset_px`, `ilm_rows`,
//!   `rpe_rows` (one nullable row per column).
//! - `state`: `phase`, `running`, `tip_rgb`, `tip_oct`, `goal_ilm`,
//!   `goal_subretinal`, `insertion_remaining_um`, `rcm_error_um`,
//!   `max_rcm_error_um`, `phase_durations_s`.
//! - `ack`: `request` (the client kind), `goal`, `phase` after the click,
//!   `insertion_distance_um` (subretinal clicks only).
//! - `rejection`: `request`, `phase`, `reason`.
//! - `error`: `message`.
//! - `trial_done`: `status` and `metrics` (the final trial report).
//!
//! Client to server: `click_ilm_goal {x, y}` (microscope pixels),
//! `click_subretinal_goal {x, y}` (B-scan column and row), `start`,
//! `pause`, `reset {config}` where `config` is an optional full or partial
//! trial configuration object. Client `seq` and `sim_time` are accepted and
//! ignored. Unknown kinds are ignored with a logged warning.

use std::collections::BTreeMap;

use base64::Engine;
use oct_servo::galvo::ScanLine;
use oct_servo::imaging::raster::encode_png;
use oct_servo::imaging::{BScanAnnotations, BScanFrame, MicroscopeAnnotations, MicroscopeFrame};
use oct_servo::metrics::{TrialMetrics, TrialStatus};
use oct_servo::servo::Phase;
use oct_servo::trial::TrialConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub sim_time: f64,
    #[serde(flatten)]
    pub body: ServerMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    MicroscopeFrame {
        frame_id: u64,
        width: u32,
        height: u32,
        png: Option<String>,
        annotations: MicroscopeAnnotations,
    },
    BscanFrame {
        frame_id: u64,
        width: u32,
        height: u32,
        png: Option<String>,
        scan_line: ScanLine,
        annotations: BScanAnnotations,
    },
    State(StateSnapshot),
    Ack {
        request: String,
        goal: [f64; 2],
        phase: Phase,
        insertion_distance_um: Option<f64>,
    },
    Rejection {
        request: String,
        phase: Phase,
        reason: String,
    },
    Error {
        message: String,
    },
    TrialDone {
        status: TrialStatus,
        metrics: Option<TrialMetrics>,
    },
}

impl ServerMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ServerMessage::MicroscopeFrame { .. } => "microscope_frame",
            ServerMessage::BscanFrame { .. } => "bscan_frame",
            ServerMessage::State(_) => "state",
            ServerMessage::Ack { .. } => "ack",
            ServerMessage::Rejection { .. } => "rejection",
            ServerMessage::Error { .. } => "error",
            ServerMessage::TrialDone { .. } => "trial_done",
        }
    }

    pub fn microscope(frame: &MicroscopeFrame) -> Self {
        ServerMessage::MicroscopeFrame {
            frame_id: frame.frame_id,
            width: frame.width,
            height: frame.height,
            png: frame.pixels.as_ref().and_then(png_base64),
            annotations: frame.annotations.clone(),
        }
    }

    pub fn bscan(frame: &BScanFrame) -> Self {
        ServerMessage::BscanFrame {
            frame_id: frame.frame_id,
            width: frame.width,
            height: frame.height,
            png: frame.pixels.as_ref().and_then(png_base64),
            scan_line: frame.scan_line,
            annotations: frame.annotations.clone(),
        }
    }
}

fn png_base64(img: &image::GrayImage) -> Option<String> {
    match encode_png(img) {
        Ok(bytes) => Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
        Err(e) => {
            log::error!("png encoding failed: {e}");
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub phase: Phase,
    pub running: bool,
    pub tip_rgb: Option<[f64; 2]>,
    pub tip_oct: Option<[f64; 2]>,
    pub goal_ilm: Option<[f64; 2]>,
    pub goal_subretinal: Option<[f64; 2]>,
    pub insertion_remaining_um: Option<f64>,
    pub rcm_error_um: f64,
    pub max_rcm_error_um: f64,
    pub phase_durations_s: BTreeMap<Phase, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientMessage {
    ClickIlmGoal { x: f64, y: f64 },
    ClickSubretinalGoal { x: f64, y: f64 },
    Start,
    Pause,
    Reset {
        #[serde(default)]
        config: Option<Box<TrialConfig>>,
    },
}

impl ClientMessage {
    pub const KINDS: [&'static str; 5] = ["click_ilm_goal", "click_subretinal_goal", "start", "pause", "reset"];

    pub fn kind(&self) -> &'static str {
        match self {
            ClientMessage::ClickIlmGoal { .. } => "click_ilm_goal",
            ClientMessage::ClickSubretinalGoal { .. } => "click_subretinal_goal",
            ClientMessage::Start => "start",
            ClientMessage::Pause => "pause",
            ClientMessage::Reset { .. } => "reset",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Parsed {
    Message(ClientMessage),
    /// A well-formed object of a kind this server does not handle.
    Unknown(String),
    Malformed(String),
}

/// Decode one inbound line.
pub fn parse_client_line(line: &str) -> Parsed {
    let value: serde_json::Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return Parsed::Malformed(format!("invalid JSON: {e}")),
    };
    let Some(mut obj) = value.as_object().cloned() else {
        return Parsed::Malformed("message must be a JSON object".into());
    };
    let kind = match obj.get("kind").and_then(|k| k.as_str()) {
        Some(k) => k.to_string(),
        None => return Parsed::Malformed("message has no string `kind`".into()),
    };
    if !ClientMessage::KINDS.contains(&kind.as_str()) {
        return Parsed::Unknown(kind);
    }
    obj.remove("seq");
    obj.remove("sim_time");
    match serde_json::from_value(serde_json::Value::Object(obj)) {
        Ok(m) => Parsed::Message(m),
        Err(e) => Parsed::Malformed(format!("bad `{kind}` message: {e}")),
    }
}

pub fn encode_line(env: &Envelope) -> String {
    let mut s = serde_json::to_string(env).expect("wire messages always serialize");
    s.push('\n');
    s
}
