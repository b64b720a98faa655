//! Wire protocol: text frames carrying `{"type": ..., "payload": {...}}`.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use taskadapt_core::policies::RotationMode;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetInfo {
    pub pose: [f64; 7],
    pub height: f64,
    pub arc: f64,
    pub mode: RotationMode,
}

/// Robot and adaptation state at the start of a tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateFrame {
    pub tick: u64,
    pub t: f64,
    pub pose: [f64; 7],
    /// Height, arc length and tool rotation on the input manifold.
    pub surface_coords: [f64; 3],
    pub twist: [f64; 6],
    pub alpha: Vec<f64>,
    pub likelihood: Vec<f64>,
    pub conditional: Vec<f64>,
    pub prior: Vec<f64>,
    pub active_target: Option<usize>,
    pub target_list: Vec<TargetInfo>,
    pub distance_to_surface: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputFrame {
    pub u_h: [f64; 3],
    pub client_time: f64,
    pub sequence: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Operator,
    Observer,
}

/// Client greeting; the service answers with the role actually granted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// Next inspection step for the operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instruction {
    pub target: Option<usize>,
    pub mode: Option<RotationMode>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "lowercase")]
pub enum Message {
    State(StateFrame),
    Input(InputFrame),
    Hello(Hello),
    Instruction(Instruction),
}

const TYPES: [&str; 4] = ["state", "input", "hello", "instruction"];

pub fn encode(msg: &Message) -> String {
    serde_json::to_string(msg).expect("frames serialize")
}

pub fn decode(text: &str) -> Result<Message, ProtocolError> {
    let bad = |m: String| ProtocolError::MalformedFrame(m);
    let v: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| bad("envelope must be an object".into()))?;
    if obj.len() != 2 {
        return Err(bad("envelope must have exactly `type` and `payload`".into()));
    }
    let ty = obj.get("type").and_then(Value::as_str).ok_or_else(|| bad("missing `type`".into()))?;
    if !TYPES.contains(&ty) {
        return Err(bad(format!("unknown type `{ty}`")));
    }
    match obj.get("payload") {
        Some(Value::Object(p)) if !p.is_empty() => {}
        _ => return Err(bad("empty payload".into())),
    }
    serde_json::from_value(v).map_err(|e| bad(e.to_string()))
}
