use std::net::{SocketAddr, TcpListener};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use super::command::run_command;
use super::gui::{perform_gui, GuiSurface, RetryPolicy};
use super::root::{ExecutionRoot, Mode};
use crate::assertions::{AssertionRegistry, EvalContext};
use crate::protocol::{
    decode_request, encode_response, error_class, fetch_chunk, test_status, ActionRequest, Capability, ErrorPayload,
    FetchRequest, FrameTransport, Handshake, Kind, PushAssembler, PushChunk, Receipt, Request, Response, Status,
    TcpTransport, TransportError, UNKNOWN_ID,
};
use crate::resolver::TargetResolver;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServeExit {
    /// A shutdown request was answered.
    Shutdown,
    /// The host went away.
    Disconnected,
    /// The handshake failed the version gate.
    HandshakeRefused(String),
}

pub struct Agent {
    pub root: ExecutionRoot,
    pub registry: AssertionRegistry,
    pub resolver: Box<dyn TargetResolver>,
    pub surface: Option<Box<dyn GuiSurface>>,
    pub retry: RetryPolicy,
    push: PushAssembler,
    last_clock: Option<DateTime<Utc>>,
}

type Handled = Result<(Status, Value), ErrorPayload>;

fn payload<T: DeserializeOwned>(req: &Request) -> Result<T, ErrorPayload> {
    serde_json::from_value(req.payload.clone()).map_err(|e| {
        ErrorPayload::new(error_class::BAD_REQUEST, format!("invalid {} payload: {e}", req.kind))
    })
}

impl Agent {
    pub fn new(root: ExecutionRoot, registry: AssertionRegistry, resolver: Box<dyn TargetResolver>) -> Self {
        Agent {
            root,
            registry,
            resolver,
            surface: None,
            retry: RetryPolicy::default(),
            push: PushAssembler::default(),
            last_clock: None,
        }
    }

    pub fn with_surface(mut self, surface: Box<dyn GuiSurface>) -> Self {
        self.surface = Some(surface);
        self
    }

    pub fn handshake(&self) -> Handshake {
        let mut caps = vec![Capability::FileTransfer];
        if self.root.mode == Mode::Sandbox {
            caps.push(Capability::Sandbox);
        }
        if self.surface.is_some() {
            caps.push(Capability::Gui);
        }
        Handshake::new(caps, self.registry.digest())
    }

    /// Agent clock, never running backwards within a session.
    fn clock(&mut self) -> DateTime<Utc> {
        let now = Utc::now();
        let t = match self.last_clock {
            Some(prev) if prev > now => prev,
            _ => now,
        };
        self.last_clock = Some(t);
        t
    }

    fn respond(&mut self, transport: &mut impl FrameTransport, id: i64, handled: Handled, started: Instant, at: DateTime<Utc>) -> Result<(), TransportError> {
        let (status, payload) = match handled {
            Ok(x) => x,
            Err(e) => (Status::Error, e.to_value()),
        };
        let r = Response {
            id,
            status,
            payload,
            agent_clock: Some(at),
            duration_ms: started.elapsed().as_millis() as u64,
        };
        transport.send_frame(&encode_response(&r))
    }

    /// Serves one connection until shutdown or disconnect. Request-level
    /// failures become error responses; the loop only ends on shutdown,
    /// disconnect or a refused handshake.
    pub fn serve(&mut self, transport: &mut impl FrameTransport) -> ServeExit {
        self.push = PushAssembler::default();
        self.last_clock = None;
        match self.accept_handshake(transport) {
            Ok(()) => {}
            Err(exit) => return exit,
        }
        loop {
            let frame = match transport.recv_frame(None) {
                Ok(f) => f,
                Err(_) => return ServeExit::Disconnected,
            };
            let started = Instant::now();
            let at = self.clock();
            let req = match decode_request(&frame) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("malformed frame: {e}");
                    let err = Err(ErrorPayload::new(error_class::PROTOCOL_ERROR, e.to_string()));
                    if self.respond(transport, UNKNOWN_ID, err, started, at).is_err() {
                        return ServeExit::Disconnected;
                    }
                    continue;
                }
            };
            let handled = self.handle(&req);
            if self.respond(transport, req.id as i64, handled, started, at).is_err() {
                return ServeExit::Disconnected;
            }
            if req.kind == Kind::Shutdown {
                return ServeExit::Shutdown;
            }
        }
    }

    fn accept_handshake(&mut self, transport: &mut impl FrameTransport) -> Result<(), ServeExit> {
        let frame = transport.recv_frame(None).map_err(|_| ServeExit::Disconnected)?;
        let started = Instant::now();
        let at = self.clock();
        let ours = self.handshake();
        let refuse = |agent: &mut Self, t: &mut _, id: i64, why: String| {
            let err = Err(ErrorPayload::new(error_class::VERSION_MISMATCH, why.clone())
                .with_details(serde_json::to_value(&ours).expect("handshake serializes")));
            let _ = agent.respond(t, id, err, started, at);
            ServeExit::HandshakeRefused(why)
        };
        let req = match decode_request(&frame) {
            Ok(r) if r.kind == Kind::Handshake => r,
            Ok(r) => return Err(refuse(self, transport, r.id as i64, format!("expected a handshake, got {}", r.kind))),
            Err(e) => return Err(refuse(self, transport, UNKNOWN_ID, e.to_string())),
        };
        let theirs: Handshake = match payload(&req) {
            Ok(h) => h,
            Err(e) => return Err(refuse(self, transport, req.id as i64, e.message)),
        };
        if let Err(why) = ours.compatible_with(&theirs) {
            return Err(refuse(self, transport, req.id as i64, why));
        }
        let ok = Ok((Status::Ok, serde_json::to_value(&ours).expect("handshake serializes")));
        self.respond(transport, req.id as i64, ok, started, at)
            .map_err(|_| ServeExit::Disconnected)
    }

    fn handle(&mut self, req: &Request) -> Handled {
        match req.kind {
            Kind::Ping | Kind::Shutdown => Ok((Status::Ok, Value::Null)),
            Kind::Handshake => Err(ErrorPayload::new(error_class::BAD_REQUEST, "handshake already completed")),
            Kind::Action => {
                let action: ActionRequest = payload(req)?;
                let outcome = match &action {
                    ActionRequest::Command { command, shell } => run_command(command, *shell, &self.root)?,
                    gui => {
                        let surface = self.surface.as_deref_mut().ok_or_else(|| {
                            ErrorPayload::new(error_class::UNSUPPORTED, "this agent has no GUI surface")
                        })?;
                        perform_gui(gui, surface, self.resolver.as_ref(), self.retry)?
                    }
                };
                Ok((Status::Ok, serde_json::to_value(outcome).expect("outcome serializes")))
            }
            Kind::Test => {
                let t: crate::protocol::TestRequest = payload(req)?;
                let ctx = EvalContext::new(&self.root);
                let result = self.registry.evaluate(&t.test_name, &t.function, &t.params, &ctx);
                Ok((test_status(&result), serde_json::to_value(result).expect("result serializes")))
            }
            Kind::PushFile => {
                let chunk: PushChunk = payload(req)?;
                let path = self
                    .root
                    .confine(&chunk.path)
                    .map_err(|e| ErrorPayload::new(error_class::CONFINEMENT, e))?;
                let seq = chunk.seq;
                match self.push.accept(chunk) {
                    Err(e) => Err(ErrorPayload::new(error_class::BAD_REQUEST, e)),
                    Ok(None) => Ok((Status::Ok, json!({"received": seq}))),
                    Ok(Some(bytes)) => {
                        if let Some(parent) = path.parent() {
                            std::fs::create_dir_all(parent)
                                .map_err(|e| ErrorPayload::new(error_class::IO, format!("{}: {e}", parent.display())))?;
                        }
                        std::fs::write(&path, &bytes)
                            .map_err(|e| ErrorPayload::new(error_class::IO, format!("{}: {e}", path.display())))?;
                        let receipt = Receipt {
                            bytes: bytes.len() as u64,
                            content_hash: crate::protocol::sha256_hex(&bytes),
                        };
                        Ok((Status::Ok, serde_json::to_value(receipt).expect("receipt serializes")))
                    }
                }
            }
            Kind::FetchFile => {
                let f: FetchRequest = payload(req)?;
                let path = self
                    .root
                    .confine(&f.path)
                    .map_err(|e| ErrorPayload::new(error_class::CONFINEMENT, e))?;
                let bytes = std::fs::read(&path)
                    .map_err(|e| ErrorPayload::new(error_class::IO, format!("{}: {e}", path.display())))?;
                let c = fetch_chunk(&bytes, f.chunk).map_err(|e| ErrorPayload::new(error_class::BAD_REQUEST, e))?;
                Ok((Status::Ok, serde_json::to_value(c).expect("chunk serializes")))
            }
        }
    }
}

/// Accepts connections one at a time until a session ends in shutdown or a
/// refused handshake. A dropped connection waits for the next one.
pub fn serve_tcp(listener: TcpListener, agent: &mut Agent) -> ServeExit {
    loop {
        let stream = match listener.accept() {
            Ok((s, peer)) => {
                log::info!("session from {peer}");
                s
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let mut t = TcpTransport::new(stream);
        match agent.serve(&mut t) {
            ServeExit::Disconnected => continue,
            other => return other,
        }
    }
}

/// An agent serving on a loopback port from a background thread.
pub struct LocalAgent {
    pub addr: SocketAddr,
    pub handle: std::thread::JoinHandle<ServeExit>,
}

pub fn spawn_local(mut agent: Agent) -> std::io::Result<LocalAgent> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let handle = std::thread::Builder::new()
        .name("tdf-agent".into())
        .spawn(move || serve_tcp(listener, &mut agent))?;
    Ok(LocalAgent { addr, handle })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{channel_pair, fetch_file, push_file, Session, TestRequest};
    use crate::resolver::FixtureResolver;
    use std::collections::BTreeMap;
    use std::time::Duration;

    fn sandbox() -> (tempfile::TempDir, Agent) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("home/u/Documents")).unwrap();
        let vars = BTreeMap::from([("adare_user_home".to_string(), "home/u".to_string())]);
        let root = ExecutionRoot::sandbox(dir.path(), vars).unwrap();
        (dir, Agent::new(root, AssertionRegistry::core(), Box::new(FixtureResolver)))
    }

    fn session(agent: Agent) -> (Session<crate::protocol::ChannelTransport>, std::thread::JoinHandle<ServeExit>) {
        let (host, mut guest) = channel_pair();
        let mut agent = agent;
        let h = std::thread::spawn(move || agent.serve(&mut guest));
        let s = Session::open(host, &Handshake::new([], "host"), Duration::from_secs(5)).unwrap();
        (s, h)
    }

    #[test]
    fn ping_and_shutdown() {
        let (_d, agent) = sandbox();
        let (mut s, h) = session(agent);
        assert!(s.peer().agent_capabilities.contains(&Capability::Sandbox));
        assert_eq!(s.request(Kind::Ping, Value::Null, Some(Duration::from_secs(2))).unwrap().status, Status::Ok);
        assert_eq!(s.request(Kind::Shutdown, Value::Null, None).unwrap().status, Status::Ok);
        assert_eq!(h.join().unwrap(), ServeExit::Shutdown);
    }

    #[test]
    fn malformed_frame_gets_id_minus_one_and_session_continues() {
        let (_d, mut agent) = sandbox();
        let (mut host, mut guest) = channel_pair();
        let h = std::thread::spawn(move || agent.serve(&mut guest));
        host.send_frame(&crate::protocol::encode_request(&Request { id: 0, kind: Kind::Handshake, payload: serde_json::to_value(Handshake::new([], "h")).unwrap(), deadline_ms: None })).unwrap();
        host.recv_frame(None).unwrap();
        host.send_frame("{this is not json").unwrap();
        let r = crate::protocol::decode_response(&host.recv_frame(None).unwrap()).unwrap();
        assert_eq!(r.id, -1);
        assert_eq!(r.status, Status::Error);
        host.send_frame(r#"{"id":1,"kind":"ping","payload":null}"#).unwrap();
        let r = crate::protocol::decode_response(&host.recv_frame(None).unwrap()).unwrap();
        assert_eq!((r.id, r.status), (1, Status::Ok));
        drop(host);
        assert_eq!(h.join().unwrap(), ServeExit::Disconnected);
    }

    #[test]
    fn handshake_version_mismatch_refused() {
        let (_d, mut agent) = sandbox();
        let (host, mut guest) = channel_pair();
        let h = std::thread::spawn(move || agent.serve(&mut guest));
        let mut hello = Handshake::new([], "h");
        hello.protocol_version = "9.0.0".into();
        assert!(Session::open(host, &hello, Duration::from_secs(5)).is_err());
        assert!(matches!(h.join().unwrap(), ServeExit::HandshakeRefused(_)));
    }

    #[test]
    fn commands_tests_and_clock() {
        let (dir, agent) = sandbox();
        let base = dir.path().canonicalize().unwrap();
        let (mut s, _h) = session(agent);
        let f = base.join("home/u/Documents/secret.txt");
        let cmd = json!({"type": "command", "command": format!("echo secret > {}", f.display()), "shell": true});
        let r = s.request(Kind::Action, cmd, None).unwrap();
        assert_eq!(r.status, Status::Ok);
        assert_eq!(r.payload["exit_code"], 0);
        let r = s.request(Kind::Action, json!({"type": "command", "command": "exit 3", "shell": true}), None).unwrap();
        assert_eq!((r.status, r.payload["exit_code"].as_i64()), (Status::Ok, Some(3)));

        let test = |dst: String| serde_json::to_value(TestRequest { test_name: "t".into(), function: "file_exists".into(), params: json!({"dst": dst}).as_object().unwrap().clone() }).unwrap();
        let r1 = s.request(Kind::Test, test(f.display().to_string()), None).unwrap();
        let r2 = s.request(Kind::Test, test(f.display().to_string()), None).unwrap();
        assert_eq!((r1.status, r2.status), (Status::TestPass, Status::TestPass));
        let r = s.request(Kind::Test, test(base.join("nope").display().to_string()), None).unwrap();
        assert_eq!(r.status, Status::TestFail);
        let r = s.request(Kind::Test, test("/etc/passwd".into()), None).unwrap();
        assert_eq!(r.status, Status::Error);
        assert_eq!(r.payload["error_class"], "confinement");

        let r = s.request(Kind::Action, json!({"type": "click", "button": "left", "target": {"text": "x"}}), None).unwrap();
        assert_eq!(r.error_payload().unwrap().class, "unsupported");

        let clocks: Vec<_> = [Kind::Ping, Kind::Ping, Kind::Ping]
            .into_iter()
            .map(|k| s.request(k, Value::Null, None).unwrap().agent_clock.unwrap())
            .collect();
        assert!(clocks.windows(2).all(|w| w[0] <= w[1]));
        assert!(crate::protocol::alternation_holds(s.trace()));
    }

    #[test]
    fn file_transfer_round_trip_and_confinement() {
        let (dir, agent) = sandbox();
        let base = dir.path().canonicalize().unwrap();
        let (mut s, _h) = session(agent);
        let bytes: Vec<u8> = (0..(crate::protocol::CHUNK_SIZE * 2 + 17)).map(|i| (i % 253) as u8).collect();
        let guest = base.join("home/u/tool.bin").display().to_string();
        let receipt = push_file(&mut s, &guest, &bytes, None).unwrap();
        assert_eq!(receipt.bytes, bytes.len() as u64);
        let (back, r2) = fetch_file(&mut s, &guest, None).unwrap();
        assert_eq!(back, bytes);
        assert_eq!(r2.content_hash, receipt.content_hash);
        assert!(push_file(&mut s, "/tmp/outside.bin", b"x", None).is_err());
        assert!(fetch_file(&mut s, "/etc/hostname", None).is_err());
        assert!(!std::path::Path::new("/tmp/outside.bin").exists());
    }

    #[test]
    fn tcp_serving_accepts_a_new_session_after_disconnect() {
        let (_d, agent) = sandbox();
        let local = spawn_local(agent).unwrap();
        for _ in 0..2 {
            let t = TcpTransport::connect(local.addr, Duration::from_secs(2)).unwrap();
            let mut s = Session::open(t, &Handshake::new([], "h"), Duration::from_secs(5)).unwrap();
            assert_eq!(s.request(Kind::Ping, Value::Null, None).unwrap().id, 1);
        }
        let t = TcpTransport::connect(local.addr, Duration::from_secs(2)).unwrap();
        let mut s = Session::open(t, &Handshake::new([], "h"), Duration::from_secs(5)).unwrap();
        s.request(Kind::Shutdown, Value::Null, None).unwrap();
        assert_eq!(local.handle.join().unwrap(), ServeExit::Shutdown);
    }
}
