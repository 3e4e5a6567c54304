//! Wire protocol between the manager and pilot agents.
//!
//! A frame is one UTF-8 JSON object terminated by `\n`, with the keys `v`,
//! `type` and `body` in that order. Decoding is strict: a frame is accepted
//! only if re-encoding the decoded message reproduces it byte for byte, so
//! reordered keys, extra whitespace, unknown fields or alternative number
//! spellings are all errors.

use std::io::{self, BufRead, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TaskSpec;

pub const PROTOCOL_VERSION: u64 = 1;

/// Longest frame a reader accepts.
pub const MAX_FRAME_LEN: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("malformed JSON frame: {0}")]
    MalformedJson(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("missing field {0}")]
    MissingField(String),
    #[error("protocol version {0} is not supported")]
    VersionMismatch(u64),
    #[error("invalid {kind} body: {reason}")]
    InvalidBody { kind: String, reason: String },
    #[error("frame is not in canonical form")]
    NonCanonical,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("frame longer than {MAX_FRAME_LEN} bytes")]
    FrameTooLong,
}

/// Seconds that print as integers when they are whole.
mod secs {
    use serde::{Deserialize, Deserializer, Serializer};

    const EXACT_INT: f64 = 9_007_199_254_740_992.0;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.fract() == 0.0 && v.abs() < EXACT_INT {
            s.serialize_i64(*v as i64)
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Register {
    pub pilot_id: String,
    pub cores: u32,
    #[serde(with = "secs")]
    pub walltime_remaining: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ack {
    pub pilot_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentPhase {
    Active,
    Draining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Heartbeat {
    pub pilot_id: String,
    pub state: AgentPhase,
    pub free_cores: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRequest {
    pub pilot_id: String,
    pub free_cores: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assign {
    pub task: TaskSpec,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoWork {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    InsufficientWalltime,
    AssignOverCapacity,
    Draining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reject {
    pub pilot_id: String,
    pub task_id: String,
    pub attempt: u32,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskResult {
    pub pilot_id: String,
    pub task_id: String,
    pub attempt: u32,
    pub exit_code: i32,
    #[serde(with = "secs")]
    pub start: f64,
    #[serde(with = "secs")]
    pub end: f64,
    /// Set when the agent synthesized the result (spawn failure, kill).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shutdown {}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register(Register),
    Ack(Ack),
    Heartbeat(Heartbeat),
    TaskRequest(TaskRequest),
    Assign(Assign),
    NoWork(NoWork),
    Reject(Reject),
    Result(TaskResult),
    Shutdown(Shutdown),
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Register(_) => "Register",
            Message::Ack(_) => "Ack",
            Message::Heartbeat(_) => "Heartbeat",
            Message::TaskRequest(_) => "TaskRequest",
            Message::Assign(_) => "Assign",
            Message::NoWork(_) => "NoWork",
            Message::Reject(_) => "Reject",
            Message::Result(_) => "Result",
            Message::Shutdown(_) => "Shutdown",
        }
    }

    fn body_json(&self) -> String {
        let body = match self {
            Message::Register(b) => serde_json::to_string(b),
            Message::Ack(b) => serde_json::to_string(b),
            Message::Heartbeat(b) => serde_json::to_string(b),
            Message::TaskRequest(b) => serde_json::to_string(b),
            Message::Assign(b) => serde_json::to_string(b),
            Message::NoWork(b) => serde_json::to_string(b),
            Message::Reject(b) => serde_json::to_string(b),
            Message::Result(b) => serde_json::to_string(b),
            Message::Shutdown(b) => serde_json::to_string(b),
        };
        body.expect("message bodies serialize")
    }

    pub fn no_work() -> Self {
        Message::NoWork(NoWork {})
    }

    pub fn shutdown() -> Self {
        Message::Shutdown(Shutdown {})
    }
}

/// Encodes one newline-terminated frame.
pub fn encode(message: &Message) -> Vec<u8> {
    let mut out = format!(
        "{{\"v\":{PROTOCOL_VERSION},\"type\":\"{}\",\"body\":{}}}",
        message.type_name(),
        message.body_json()
    )
    .into_bytes();
    out.push(b'\n');
    out
}

fn body<T: DeserializeOwned>(kind: &str, value: serde_json::Value) -> Result<T, DecodeError> {
    serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        match msg.strip_prefix("missing field `").and_then(|rest| rest.split('`').next()) {
            Some(field) => DecodeError::MissingField(field.to_string()),
            None => DecodeError::InvalidBody {
                kind: kind.to_string(),
                reason: msg,
            },
        }
    })
}

/// Decodes one frame. A single trailing newline is allowed.
pub fn decode(frame: &[u8]) -> Result<Message, DecodeError> {
    let line = frame.strip_suffix(b"\n").unwrap_or(frame);
    if line.contains(&b'\n') {
        return Err(DecodeError::MalformedJson("more than one line".into()));
    }
    let value: serde_json::Value =
        serde_json::from_slice(line).map_err(|e| DecodeError::MalformedJson(e.to_string()))?;
    let serde_json::Value::Object(mut obj) = value else {
        return Err(DecodeError::MalformedJson("frame is not a JSON object".into()));
    };

    let v = obj.remove("v").ok_or_else(|| DecodeError::MissingField("v".into()))?;
    let v = v
        .as_u64()
        .ok_or_else(|| DecodeError::MalformedJson("v is not a non-negative integer".into()))?;
    if v != PROTOCOL_VERSION {
        return Err(DecodeError::VersionMismatch(v));
    }
    let kind = match obj.remove("type") {
        Some(serde_json::Value::String(s)) => s,
        Some(_) => return Err(DecodeError::MalformedJson("type is not a string".into())),
        None => return Err(DecodeError::MissingField("type".into())),
    };
    let payload = obj.remove("body").ok_or_else(|| DecodeError::MissingField("body".into()))?;
    if let Some(extra) = obj.keys().next() {
        return Err(DecodeError::MalformedJson(format!("unexpected key {extra:?}")));
    }

    let message = match kind.as_str() {
        "Register" => Message::Register(body(&kind, payload)?),
        "Ack" => Message::Ack(body(&kind, payload)?),
        "Heartbeat" => Message::Heartbeat(body(&kind, payload)?),
        "TaskRequest" => Message::TaskRequest(body(&kind, payload)?),
        "Assign" => Message::Assign(body(&kind, payload)?),
        "NoWork" => Message::NoWork(body(&kind, payload)?),
        "Reject" => Message::Reject(body(&kind, payload)?),
        "Result" => Message::Result(body(&kind, payload)?),
        "Shutdown" => Message::Shutdown(body(&kind, payload)?),
        _ => return Err(DecodeError::UnknownType(kind)),
    };

    let canonical = encode(&message);
    if &canonical[..canonical.len() - 1] != line {
        return Err(DecodeError::NonCanonical);
    }
    Ok(message)
}

pub fn write_frame<W: Write>(mut out: W, message: &Message) -> io::Result<()> {
    out.write_all(&encode(message))?;
    out.flush()
}

/// Reads and decodes the next frame. `Ok(None)` at end of stream.
pub fn read_frame<R: BufRead>(input: &mut R) -> Result<Option<Message>, TransportError> {
    let mut line = Vec::new();
    let n = Read::take(&mut *input, MAX_FRAME_LEN as u64 + 1).read_until(b'\n', &mut line)?;
    if n == 0 {
        return Ok(None);
    }
    if line.len() > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLong);
    }
    Ok(Some(decode(&line)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(m: &Message) -> String {
        String::from_utf8(encode(m)).unwrap()
    }

    #[test]
    fn register_frame_is_exact() {
        let m = Message::Register(Register {
            pilot_id: "p1".into(),
            cores: 4,
            walltime_remaining: 300.0,
        });
        assert_eq!(
            text(&m),
            "{\"v\":1,\"type\":\"Register\",\"body\":{\"pilot_id\":\"p1\",\"cores\":4,\"walltime_remaining\":300}}\n"
        );
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn no_work_frame_is_exact() {
        assert_eq!(text(&Message::no_work()), "{\"v\":1,\"type\":\"NoWork\",\"body\":{}}\n");
    }

    #[test]
    fn fractional_seconds_survive() {
        let m = Message::Result(TaskResult {
            pilot_id: "p".into(),
            task_id: "t".into(),
            attempt: 1,
            exit_code: 0,
            start: 1.25,
            end: 3.0,
            reason: None,
        });
        assert!(text(&m).contains("\"start\":1.25,\"end\":3}"));
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn version_mismatch() {
        assert_eq!(
            decode(b"{\"v\":2,\"type\":\"NoWork\",\"body\":{}}\n"),
            Err(DecodeError::VersionMismatch(2))
        );
    }

    #[test]
    fn unknown_type() {
        assert_eq!(
            decode(b"{\"v\":1,\"type\":\"Bogus\",\"body\":{}}"),
            Err(DecodeError::UnknownType("Bogus".into()))
        );
    }

    #[test]
    fn truncated_line_is_malformed() {
        assert!(matches!(
            decode(b"{\"v\":1,\"type\":\"NoWork\",\"bo"),
            Err(DecodeError::MalformedJson(_))
        ));
    }

    #[test]
    fn missing_body_field_is_named() {
        assert_eq!(
            decode(b"{\"v\":1,\"type\":\"TaskRequest\",\"body\":{\"pilot_id\":\"p\"}}"),
            Err(DecodeError::MissingField("free_cores".into()))
        );
    }

    #[test]
    fn non_canonical_spellings_are_rejected() {
        for frame in [
            &b"{\"type\":\"NoWork\",\"v\":1,\"body\":{}}"[..],
            b"{\"v\":1, \"type\":\"NoWork\",\"body\":{}}",
            b"{\"v\":1,\"type\":\"TaskRequest\",\"body\":{\"free_cores\":1,\"pilot_id\":\"p\"}}",
            b"{\"v\":1,\"type\":\"Register\",\"body\":{\"pilot_id\":\"p\",\"cores\":4,\"walltime_remaining\":300.0}}",
        ] {
            assert!(decode(frame).is_err(), "{}", String::from_utf8_lossy(frame));
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(decode(b"{\"v\":1,\"type\":\"NoWork\",\"body\":{\"x\":1}}").is_err());
        assert!(decode(b"{\"v\":1,\"type\":\"NoWork\",\"body\":{},\"x\":1}").is_err());
    }

    #[test]
    fn frames_over_a_stream() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Message::no_work()).unwrap();
        write_frame(&mut buf, &Message::shutdown()).unwrap();
        let mut r = io::Cursor::new(buf);
        assert_eq!(read_frame(&mut r).unwrap(), Some(Message::no_work()));
        assert_eq!(read_frame(&mut r).unwrap(), Some(Message::shutdown()));
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }
}
