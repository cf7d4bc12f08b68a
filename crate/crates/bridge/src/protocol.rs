//! Wire format. Every frame is a JSON object
//! `{"version", "seq", "in_reply_to"?, "type", "payload"?}`; `seq` strictly
//! increases in each direction of a connection.

use dissect_core::harness::{AssistChoice, RunReport};
use dissect_core::perception::CameraSpec;
use dissect_core::servo::StopReason;
use dissect_core::Vec3;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

/// JSON schema of both directions.
pub const SCHEMA: &str = include_str!("../schema/session.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub version: u32,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_reply_to: Option<u64>,
    #[serde(flatten)]
    pub message: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum ClientMessage {
    /// Ask for a full snapshot.
    Snapshot,
    /// Surface picks for the segment endpoints.
    SetSegment {
        start: Vec3,
        end: Vec3,
        #[serde(default)]
        tolerance: Option<f64>,
    },
    RunAps,
    StepControl { n: usize },
    MarkDissected,
    Reset,
}

impl ClientMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ClientMessage::Snapshot => "snapshot",
            ClientMessage::SetSegment { .. } => "set_segment",
            ClientMessage::RunAps => "run_aps",
            ClientMessage::StepControl { .. } => "step_control",
            ClientMessage::MarkDissected => "mark_dissected",
            ClientMessage::Reset => "reset",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// No segment bound.
    Idle,
    SegmentSet,
    /// Assistance position chosen, loop not started.
    Selected,
    Servoing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum ServerMessage {
    Snapshot(Snapshot),
    SetSegment(SegmentBound),
    RunAps(ApsMap),
    TraceEvent(TraceEvent),
    StepControl(StepSummary),
    MarkDissected(RequestClosed),
    Error(ErrorPayload),
}

impl ServerMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ServerMessage::Snapshot(_) => "snapshot",
            ServerMessage::SetSegment(_) => "set_segment",
            ServerMessage::RunAps(_) => "run_aps",
            ServerMessage::TraceEvent(_) => "trace_event",
            ServerMessage::StepControl(_) => "step_control",
            ServerMessage::MarkDissected(_) => "mark_dissected",
            ServerMessage::Error(_) => "error",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub state: Phase,
    /// Requests closed so far.
    pub request: usize,
    pub step: usize,
    /// All particle positions of the true tissue; faces index into this.
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub marked: Vec<usize>,
    pub camera: CameraSpec,
    pub segment: Option<[Vec3; 2]>,
    pub assist: Option<AssistChoice>,
    /// Current end-effector position.
    pub p: Option<Vec3>,
    /// APS score per surface face, when a map exists.
    pub scores: Option<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEcho {
    pub radius: f64,
    pub k: f64,
    pub center: Vec3,
    pub left: Vec3,
    pub right: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentBound {
    pub endpoints: [Vec3; 2],
    pub pairs: Vec<PairEcho>,
    pub marked: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApsMap {
    /// True when the map was computed by an earlier request.
    pub cached: bool,
    pub choice: AssistChoice,
    pub scores: Vec<Option<f64>>,
    pub map_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexDelta {
    pub index: usize,
    pub position: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: usize,
    pub p: Vec3,
    pub dp: Vec3,
    pub error_norm: f64,
    pub wedge_error_norm: f64,
    pub shear_error_norm: f64,
    pub stretch_error_norm: f64,
    /// Marked-area ratio of the current true state.
    pub rho: f64,
    /// Positions that changed since the last frame.
    pub moved: Vec<VertexDelta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub steps_run: usize,
    pub total_steps: usize,
    pub stop: Option<StopReason>,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestClosed {
    pub request: usize,
    pub report: RunReport,
    /// Run directory, when an output directory is configured.
    pub persisted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub reason: String,
    /// State after the rejected message; unchanged by it.
    pub state: Phase,
}

/// Parses a client frame, checking the protocol version.
pub fn parse_client(text: &str) -> Result<Envelope<ClientMessage>, String> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("malformed JSON: {e}"))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == PROTOCOL_VERSION as u64 => {}
        Some(v) => return Err(format!("unsupported protocol version {v} (expected {PROTOCOL_VERSION})")),
        None => return Err("missing protocol version".into()),
    }
    serde_json::from_value(value).map_err(|e| format!("invalid message: {e}"))
}

pub fn encode<T: Serialize>(env: &Envelope<T>) -> String {
    serde_json::to_string(env).expect("messages serialize")
}
