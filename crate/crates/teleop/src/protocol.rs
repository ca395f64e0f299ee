//! Wire messages. Every message is a JSON text frame
//! `{"type": ..., "payload": ..., "tick": ...}`.

use faultarm::sim::Pose;
use faultarm::DegradationConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointerTarget {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Delta {
    pub d: f64,
}

/// Operator commands, applied in arrival order at the next tick.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    SetPointerTarget(PointerTarget),
    GripperDelta(Delta),
    YawDelta(Delta),
    SetDegradation(DegradationConfig),
    StartRecording { task_id: usize },
    StopRecording { save: bool },
    ResetScene { seed: u64 },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskPayload {
    task_id: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StopPayload {
    save: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SeedPayload {
    seed: u64,
}

impl Command {
    /// Parses one client text frame. The envelope's `tick` is optional and
    /// ignored; errors are human-readable.
    pub fn parse(text: &str) -> Result<Command, String> {
        let v: Value = serde_json::from_str(text).map_err(|e| format!("malformed JSON: {e}"))?;
        let Value::Object(mut obj) = v else {
            return Err("message must be a JSON object".into());
        };
        let kind = match obj.remove("type") {
            Some(Value::String(s)) => s,
            _ => return Err("message needs a string \"type\"".into()),
        };
        let payload = obj.remove("payload").unwrap_or(Value::Null);
        obj.remove("tick");
        if let Some(extra) = obj.keys().next() {
            return Err(format!("unknown envelope field {extra:?}"));
        }
        fn field<T: serde::de::DeserializeOwned>(kind: &str, p: Value) -> Result<T, String> {
            serde_json::from_value(p).map_err(|e| format!("bad payload for {kind}: {e}"))
        }
        Ok(match kind.as_str() {
            "set_pointer_target" => Command::SetPointerTarget(field(&kind, payload)?),
            "gripper_delta" => Command::GripperDelta(field(&kind, payload)?),
            "yaw_delta" => Command::YawDelta(field(&kind, payload)?),
            "set_degradation" => Command::SetDegradation(field(&kind, payload)?),
            "start_recording" => Command::StartRecording {
                task_id: field::<TaskPayload>(&kind, payload)?.task_id,
            },
            "stop_recording" => Command::StopRecording {
                save: field::<StopPayload>(&kind, payload)?.save,
            },
            "reset_scene" => Command::ResetScene {
                seed: field::<SeedPayload>(&kind, payload)?.seed,
            },
            other => return Err(format!("unknown message type {other:?}")),
        })
    }
}

/// Static scene description, sent once with a client's first frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub link_lengths: Vec<f64>,
    pub nominal_limits: Vec<(f64, f64)>,
    pub grasp_radius: f64,
    pub success_tolerance: f64,
    pub table_height: f64,
    pub tasks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub task_id: usize,
    pub episode_tick: usize,
    pub q: Vec<f64>,
    pub ee_pose: Pose,
    pub gripper: f64,
    pub object_pos: [f64; 2],
    pub target_pos: [f64; 2],
    pub attached: bool,
    pub health: Vec<f64>,
    pub recording: bool,
    pub recorded_steps: usize,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<Geometry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Owner,
    Spectator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Saved {
    pub path: String,
    pub steps: usize,
    pub success: bool,
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum ServerMessage {
    Session { role: Role },
    State(StateFrame),
    Error { message: String },
    RecordingSaved(Saved),
    RecordingDiscarded { steps: usize },
}

#[derive(Serialize)]
struct Envelope<'a> {
    #[serde(flatten)]
    message: &'a ServerMessage,
    tick: u64,
}

impl ServerMessage {
    pub fn to_json(&self, tick: u64) -> String {
        serde_json::to_string(&Envelope { message: self, tick }).expect("server messages serialize")
    }
}
