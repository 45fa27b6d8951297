use std::time::{Duration, Instant};

use serde_json::Value;

use super::{
    decode_response, encode_request, error_class, ErrorPayload, FrameTransport, Handshake, Kind, ProtocolError,
    Request, Response, Status, TransportError, UNKNOWN_ID,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Sent { id: u64, kind: Kind },
    /// A terminal response; `synthesized` marks ones made up by the host
    /// (deadline, lost connection, protocol violation).
    Received { id: i64, status: Status, synthesized: bool },
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("handshake failed: {0}")]
    Transport(#[from] TransportError),
    #[error("handshake refused: {0}")]
    Refused(String),
    #[error("handshake reply invalid: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("session is poisoned ({0}); reconnect to continue")]
    Poisoned(String),
}

/// Host end of one connection. Exactly one request is outstanding at a time.
pub struct Session<T: FrameTransport> {
    transport: T,
    next_id: u64,
    peer: Handshake,
    poisoned: Option<String>,
    trace: Vec<TraceEvent>,
    /// Wait bound for requests without their own deadline.
    pub default_wait: Option<Duration>,
}

impl<T: FrameTransport> Session<T> {
    /// Sends the handshake as frame 0 and checks the peer's reply.
    pub fn open(mut transport: T, hello: &Handshake, timeout: Duration) -> Result<Self, SessionError> {
        let req = Request {
            id: 0,
            kind: Kind::Handshake,
            payload: serde_json::to_value(hello).expect("handshake serializes"),
            deadline_ms: Some(timeout.as_millis() as u64),
        };
        transport.send_frame(&encode_request(&req))?;
        let reply = decode_response(&transport.recv_frame(Some(timeout))?)?;
        if reply.id != 0 {
            return Err(SessionError::Refused(format!("handshake reply has id {}", reply.id)));
        }
        if reply.status != Status::Ok {
            let why = reply
                .error_payload()
                .map_or_else(|| reply.payload.to_string(), |e| e.message);
            return Err(SessionError::Refused(why));
        }
        let peer: Handshake = serde_json::from_value(reply.payload).map_err(|e| {
            SessionError::Protocol(ProtocolError::InvalidField {
                field: "payload",
                reason: e.to_string(),
            })
        })?;
        hello.compatible_with(&peer).map_err(SessionError::Refused)?;
        Ok(Session {
            transport,
            next_id: 1,
            peer,
            poisoned: None,
            trace: vec![
                TraceEvent::Sent { id: 0, kind: Kind::Handshake },
                TraceEvent::Received { id: 0, status: Status::Ok, synthesized: false },
            ],
            default_wait: None,
        })
    }

    pub fn peer(&self) -> &Handshake {
        &self.peer
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn poisoned(&self) -> Option<&str> {
        self.poisoned.as_deref()
    }

    pub fn into_transport(self) -> T {
        self.transport
    }

    fn synthesize(&mut self, id: u64, started: Instant, class: &str, message: String, poison: bool) -> Response {
        if poison {
            self.poisoned = Some(class.to_string());
        }
        let r = Response {
            id: id as i64,
            status: Status::Error,
            payload: ErrorPayload::new(class, message).to_value(),
            agent_clock: None,
            duration_ms: started.elapsed().as_millis() as u64,
        };
        self.trace.push(TraceEvent::Received {
            id: r.id,
            status: r.status,
            synthesized: true,
        });
        r
    }

    /// Sends one request and blocks for its terminal response. Deadline
    /// expiry and connection loss produce a synthesized error response and
    /// poison the session.
    pub fn request(&mut self, kind: Kind, payload: Value, deadline: Option<Duration>) -> Result<Response, SessionError> {
        if let Some(p) = &self.poisoned {
            return Err(SessionError::Poisoned(p.clone()));
        }
        let id = self.next_id;
        self.next_id += 1;
        let req = Request {
            id,
            kind,
            payload,
            deadline_ms: deadline.map(|d| d.as_millis() as u64),
        };
        let started = Instant::now();
        self.trace.push(TraceEvent::Sent { id, kind });
        if let Err(e) = self.transport.send_frame(&encode_request(&req)) {
            return Ok(self.synthesize(id, started, error_class::CONNECTION_LOST, e.to_string(), true));
        }
        let wait = deadline.or(self.default_wait);
        let until = wait.map(|w| started + w);
        let left = until.map(|u| u.saturating_duration_since(Instant::now()));
        let frame = match self.transport.recv_frame(left) {
            Ok(f) => f,
            Err(TransportError::Timeout) => {
                let ms = wait.unwrap_or_default().as_millis();
                return Ok(self.synthesize(
                    id,
                    started,
                    error_class::DEADLINE_EXCEEDED,
                    format!("no response to {kind} request {id} within {ms} ms"),
                    true,
                ));
            }
            Err(e) => {
                return Ok(self.synthesize(id, started, error_class::CONNECTION_LOST, e.to_string(), true));
            }
        };
        let resp = match decode_response(&frame) {
            Ok(r) => r,
            Err(e) => {
                return Ok(self.synthesize(
                    id,
                    started,
                    error_class::PROTOCOL_ERROR,
                    format!("undecodable response: {e}"),
                    true,
                ))
            }
        };
        if resp.id == UNKNOWN_ID && resp.status == Status::Error {
            // The agent could not read our request; it stays usable.
            let msg = resp.error_payload().map_or_else(|| resp.payload.to_string(), |e| e.message);
            return Ok(self.synthesize(id, started, error_class::PROTOCOL_ERROR, msg, false));
        }
        if resp.id != id as i64 {
            return Ok(self.synthesize(
                id,
                started,
                error_class::PROTOCOL_ERROR,
                format!("response id {} does not echo request id {id}", resp.id),
                true,
            ));
        }
        self.trace.push(TraceEvent::Received {
            id: resp.id,
            status: resp.status,
            synthesized: false,
        });
        Ok(resp)
    }
}

/// Checks the strict-alternation invariant: at every prefix of the trace the
/// number of sent requests minus terminal responses is 0 or 1, and each
/// response echoes the id of the request before it.
pub fn alternation_holds(trace: &[TraceEvent]) -> bool {
    let mut outstanding: Option<u64> = None;
    for ev in trace {
        match (ev, outstanding) {
            (TraceEvent::Sent { id, .. }, None) => outstanding = Some(*id),
            (TraceEvent::Received { id, .. }, Some(o)) if *id == o as i64 => outstanding = None,
            _ => return false,
        }
    }
    true
}

/// Opens a session and runs the requests in order. Stops early once the
/// session is poisoned; the synthesized response that poisoned it is the
/// last element.
pub fn run_session<T: FrameTransport>(
    transport: T,
    hello: &Handshake,
    requests: impl IntoIterator<Item = (Kind, Value, Option<Duration>)>,
    handshake_timeout: Duration,
) -> Result<(Vec<Response>, Vec<TraceEvent>), SessionError> {
    let mut s = Session::open(transport, hello, handshake_timeout)?;
    let mut out = Vec::new();
    for (kind, payload, deadline) in requests {
        out.push(s.request(kind, payload, deadline)?);
        if s.poisoned().is_some() {
            break;
        }
    }
    Ok((out, s.trace))
}
