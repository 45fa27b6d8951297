//! Host/agent wire protocol: one JSON object per frame, strictly alternating
//! request and response.

mod session;
mod transfer;
mod transport;

use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::assertions::TestResult;
use crate::playbook::{ClickButton, ScrollDirection};
use crate::resolver::{Method, Region, Target};

pub use session::{alternation_holds, run_session, Session, SessionError, TraceEvent};
pub use transfer::{
    fetch_chunk, fetch_file, push_file, sha256_hex, FetchChunk, FetchRequest, PushAssembler, PushChunk, Receipt,
    TransferError, CHUNK_SIZE,
};
pub use transport::{channel_pair, ChannelTransport, FrameTransport, TcpTransport, TransportError, MAX_FRAME_BYTES};

pub const PROTOCOL_VERSION: &str = "1.0.0";
pub const DEFAULT_PORT: u16 = 48620;
/// Response id used when the request id could not be read.
pub const UNKNOWN_ID: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Handshake,
    Action,
    Test,
    PushFile,
    FetchFile,
    Ping,
    Shutdown,
}

impl Kind {
    pub const ALL: [Kind; 7] = [
        Kind::Handshake,
        Kind::Action,
        Kind::Test,
        Kind::PushFile,
        Kind::FetchFile,
        Kind::Ping,
        Kind::Shutdown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Handshake => "handshake",
            Kind::Action => "action",
            Kind::Test => "test",
            Kind::PushFile => "push_file",
            Kind::FetchFile => "fetch_file",
            Kind::Ping => "ping",
            Kind::Shutdown => "shutdown",
        }
    }

    fn parse(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    TestPass,
    TestFail,
    Error,
}

impl Status {
    pub const ALL: [Status; 4] = [Status::Ok, Status::TestPass, Status::TestFail, Status::Error];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::TestPass => "test_pass",
            Status::TestFail => "test_fail",
            Status::Error => "error",
        }
    }

    fn parse(s: &str) -> Option<Status> {
        Status::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: u64,
    pub kind: Kind,
    pub payload: Value,
    pub deadline_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub id: i64,
    pub status: Status,
    pub payload: Value,
    pub agent_clock: Option<DateTime<Utc>>,
    pub duration_ms: u64,
}

impl Response {
    /// Payload of an error response, if it has the standard shape.
    pub fn error_payload(&self) -> Option<ErrorPayload> {
        if self.status != Status::Error {
            return None;
        }
        serde_json::from_value(self.payload.clone()).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Request(Request),
    Response(Response),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Gui,
    Sandbox,
    FileTransfer,
}

/// Exchanged as frame 0 in both directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol_version: String,
    pub agent_capabilities: BTreeSet<Capability>,
    pub registry_digest: String,
}

impl Handshake {
    pub fn new(capabilities: impl IntoIterator<Item = Capability>, registry_digest: impl Into<String>) -> Self {
        Handshake {
            protocol_version: PROTOCOL_VERSION.into(),
            agent_capabilities: capabilities.into_iter().collect(),
            registry_digest: registry_digest.into(),
        }
    }

    /// Peers agree iff both versions parse and their major components match.
    pub fn compatible_with(&self, other: &Handshake) -> Result<(), String> {
        let parse = |v: &str| semver::Version::parse(v).map_err(|e| format!("bad protocol version `{v}`: {e}"));
        let (a, b) = (parse(&self.protocol_version)?, parse(&other.protocol_version)?);
        if a.major != b.major {
            return Err(format!(
                "protocol major version mismatch: {} vs {}",
                self.protocol_version, other.protocol_version
            ));
        }
        Ok(())
    }
}

/// Payload of every `error` response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub class: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

impl ErrorPayload {
    pub fn new(class: impl Into<String>, message: impl Into<String>) -> Self {
        ErrorPayload {
            class: class.into(),
            message: message.into(),
            details: Value::Null,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("error payload serializes")
    }
}

/// Well-known error classes.
pub mod error_class {
    pub const DEADLINE_EXCEEDED: &str = "deadline_exceeded";
    pub const CONNECTION_LOST: &str = "connection_lost";
    pub const PROTOCOL_ERROR: &str = "protocol_error";
    pub const TARGET_NOT_FOUND: &str = "target_not_found";
    pub const RESOLVER_BACKEND: &str = "resolver_backend";
    pub const SPAWN_FAILED: &str = "spawn_failed";
    pub const CONFINEMENT: &str = "confinement";
    pub const BAD_REQUEST: &str = "bad_request";
    pub const IO: &str = "io";
    pub const UNSUPPORTED: &str = "unsupported";
    pub const VERSION_MISMATCH: &str = "version_mismatch";
}

/// Payload of an `action` request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ActionRequest {
    Command { command: String, shell: bool },
    Click { button: ClickButton, target: Target },
    TypeText { text: String },
    Scroll { direction: ScrollDirection, amount: u32 },
    DragDrop { from: Target, to: Target },
}

/// Payload of a successful `action` response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ActionOutcome {
    Command {
        /// `None` when the process was killed by a signal.
        exit_code: Option<i32>,
        stdout: String,
        stderr: String,
        stdout_truncated: bool,
        stderr_truncated: bool,
        started_at: DateTime<Utc>,
        duration_ms: u64,
    },
    Gui {
        resolved_region: Region,
        confidence: f64,
        method: Method,
        #[serde(default)]
        ambiguous: bool,
        /// Drop target of a drag.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        drop_region: Option<Region>,
        injected_events_count: u32,
        started_at: DateTime<Utc>,
        duration_ms: u64,
    },
    Keyboard {
        injected_events_count: u32,
        started_at: DateTime<Utc>,
        duration_ms: u64,
    },
}

/// Payload of a `test` request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRequest {
    pub test_name: String,
    pub function: String,
    pub params: Map<String, Value>,
}

/// Maps an assertion result to the response status used for `test` requests.
pub fn test_status(r: &TestResult) -> Status {
    match r.status {
        crate::assertions::TestStatus::Pass => Status::TestPass,
        crate::assertions::TestStatus::Fail => Status::TestFail,
        crate::assertions::TestStatus::Error => Status::Error,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("unknown kind `{0}`")]
    UnknownKind(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::InvalidField {
        field,
        reason: reason.into(),
    }
}

pub fn encode_request(r: &Request) -> String {
    let mut m = Map::new();
    m.insert("id".into(), r.id.into());
    m.insert("kind".into(), r.kind.as_str().into());
    m.insert("payload".into(), r.payload.clone());
    if let Some(d) = r.deadline_ms {
        m.insert("deadline_ms".into(), d.into());
    }
    Value::Object(m).to_string()
}

pub fn encode_response(r: &Response) -> String {
    let mut m = Map::new();
    m.insert("id".into(), r.id.into());
    m.insert("status".into(), r.status.as_str().into());
    m.insert("payload".into(), r.payload.clone());
    if let Some(c) = r.agent_clock {
        m.insert("agent_clock".into(), c.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true).into());
    }
    m.insert("duration_ms".into(), r.duration_ms.into());
    Value::Object(m).to_string()
}

/// Encodes a message. JSON string escaping guarantees a single line.
pub fn encode(msg: &Message) -> String {
    match msg {
        Message::Request(r) => encode_request(r),
        Message::Response(r) => encode_response(r),
    }
}

/// Recursively sorts object keys.
pub fn canonicalize(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            Value::Object(keys.into_iter().map(|k| (k.clone(), canonicalize(&m[k]))).collect())
        }
        Value::Array(a) => Value::Array(a.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

/// Like [`encode`] but with payload keys sorted, so equal messages always
/// produce identical bytes.
pub fn encode_canonical(msg: &Message) -> String {
    match msg {
        Message::Request(r) => encode_request(&Request {
            payload: canonicalize(&r.payload),
            ..r.clone()
        }),
        Message::Response(r) => encode_response(&Response {
            payload: canonicalize(&r.payload),
            ..r.clone()
        }),
    }
}

fn parse_object(frame: &str) -> Result<Map<String, Value>, ProtocolError> {
    match serde_json::from_str::<Value>(frame) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ProtocolError::Malformed("frame is not a JSON object".into())),
        Err(e) => Err(ProtocolError::Malformed(e.to_string())),
    }
}

fn field<'a>(m: &'a Map<String, Value>, name: &'static str) -> Result<&'a Value, ProtocolError> {
    m.get(name).ok_or(ProtocolError::MissingField(name))
}

fn opt_u64(m: &Map<String, Value>, name: &'static str) -> Result<Option<u64>, ProtocolError> {
    match m.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v.as_u64().map(Some).ok_or_else(|| invalid(name, "expected a non-negative integer")),
    }
}

fn request_from(m: &Map<String, Value>) -> Result<Request, ProtocolError> {
    let id = field(m, "id")?
        .as_u64()
        .ok_or_else(|| invalid("id", "expected a non-negative integer"))?;
    let kind_text = field(m, "kind")?.as_str().ok_or_else(|| invalid("kind", "expected a string"))?;
    let kind = Kind::parse(kind_text).ok_or_else(|| ProtocolError::UnknownKind(kind_text.into()))?;
    let payload = field(m, "payload")?.clone();
    let deadline_ms = opt_u64(m, "deadline_ms")?;
    Ok(Request {
        id,
        kind,
        payload,
        deadline_ms,
    })
}

fn response_from(m: &Map<String, Value>) -> Result<Response, ProtocolError> {
    let id = field(m, "id")?.as_i64().ok_or_else(|| invalid("id", "expected an integer"))?;
    let status_text = field(m, "status")?
        .as_str()
        .ok_or_else(|| invalid("status", "expected a string"))?;
    let status = Status::parse(status_text).ok_or_else(|| invalid("status", format!("unknown status `{status_text}`")))?;
    let payload = field(m, "payload")?.clone();
    let duration_ms = field(m, "duration_ms")?
        .as_u64()
        .ok_or_else(|| invalid("duration_ms", "expected a non-negative integer"))?;
    let agent_clock = match m.get("agent_clock") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(
            DateTime::parse_from_rfc3339(s)
                .map_err(|e| invalid("agent_clock", e.to_string()))?
                .with_timezone(&Utc),
        ),
        Some(_) => return Err(invalid("agent_clock", "expected an RFC 3339 string")),
    };
    Ok(Response {
        id,
        status,
        payload,
        agent_clock,
        duration_ms,
    })
}

pub fn decode_request(frame: &str) -> Result<Request, ProtocolError> {
    request_from(&parse_object(frame)?)
}

pub fn decode_response(frame: &str) -> Result<Response, ProtocolError> {
    response_from(&parse_object(frame)?)
}

/// Decodes either message type; a frame with a `status` field is a response.
/// Unknown extra fields are ignored.
pub fn decode(frame: &str) -> Result<Message, ProtocolError> {
    let m = parse_object(frame)?;
    if m.contains_key("status") {
        response_from(&m).map(Message::Response)
    } else {
        request_from(&m).map(Message::Request)
    }
}

/// Best-effort id of a frame that failed to decode.
pub fn salvage_id(frame: &str) -> i64 {
    serde_json::from_str::<Value>(frame)
        .ok()
        .and_then(|v| v.get("id").and_then(Value::as_i64))
        .unwrap_or(UNKNOWN_ID)
}
