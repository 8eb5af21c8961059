//! Planner service over a byte stream, and the client the simulator uses to
//! reach it.
//!
//! Frames are a 4-byte big-endian body length followed by a compact JSON
//! object `{kind, payload, seq}` with every object's keys sorted, so equal
//! messages always encode to equal bytes.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::envelope::Envelope;
use crate::error::{Error, Result};
use crate::events::{EventDecision, SpatState};
use crate::planner::{self, DecelPlanRequest, PlanResult, PlannerConfig};
use crate::powertrain::VehicleParams;
use crate::simroute::{self, PlanService};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Kind {
    Hello,
    PlanRequest,
    PlanResponse,
    EventDecisionRequest,
    EventDecisionResponse,
    Error,
    Bye,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireMessage {
    pub kind: Kind,
    pub seq: u64,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub spat: SpatState,
    pub v_i: f64,
    pub d_res: f64,
    pub tol: f64,
    pub max_n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    /// Truncated or unparsable frame.
    Frame,
    Oversize,
    Version,
    /// Well-formed frame that breaks the session rules.
    Protocol,
    /// The planner or event logic rejected the request.
    Planner,
}

impl ErrorCode {
    pub fn name(self) -> &'static str {
        match self {
            ErrorCode::Frame => "FRAME",
            ErrorCode::Oversize => "OVERSIZE",
            ErrorCode::Version => "VERSION",
            ErrorCode::Protocol => "PROTOCOL",
            ErrorCode::Planner => "PLANNER",
        }
    }
}

/// Planner-side failure carried in an ERROR payload so the client can
/// rebuild the same error value the in-process call would have returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum RemoteError {
    InvalidParam { detail: String },
    Domain { detail: String },
    InfeasibleShape { detail: String },
    InfeasibleRequest { detail: String },
    HorizonTooShort { steps: usize },
    NoFeasibleTrajectory { stage: usize, reason: String },
    Mismatch { detail: String },
    Classification { c_trans: u8, phase: String },
    Other { detail: String },
}

impl RemoteError {
    pub fn from_error(e: &Error) -> Self {
        match e {
            Error::InvalidParam(s) => RemoteError::InvalidParam { detail: s.clone() },
            Error::Domain(s) => RemoteError::Domain { detail: s.clone() },
            Error::InfeasibleShape(s) => RemoteError::InfeasibleShape { detail: s.clone() },
            Error::InfeasibleRequest(s) => RemoteError::InfeasibleRequest { detail: s.clone() },
            Error::HorizonTooShort { steps } => RemoteError::HorizonTooShort { steps: *steps },
            Error::NoFeasibleTrajectory { stage, reason } => RemoteError::NoFeasibleTrajectory {
                stage: *stage,
                reason: reason.clone(),
            },
            Error::Mismatch(s) => RemoteError::Mismatch { detail: s.clone() },
            Error::Classification { c_trans, phase } => RemoteError::Classification {
                c_trans: *c_trans,
                phase: phase.clone(),
            },
            other => RemoteError::Other {
                detail: other.to_string(),
            },
        }
    }

    fn into_error(self) -> Error {
        match self {
            RemoteError::InvalidParam { detail } => Error::InvalidParam(detail),
            RemoteError::Domain { detail } => Error::Domain(detail),
            RemoteError::InfeasibleShape { detail } => Error::InfeasibleShape(detail),
            RemoteError::InfeasibleRequest { detail } => Error::InfeasibleRequest(detail),
            RemoteError::HorizonTooShort { steps } => Error::HorizonTooShort { steps },
            RemoteError::NoFeasibleTrajectory { stage, reason } => Error::NoFeasibleTrajectory { stage, reason },
            RemoteError::Mismatch { detail } => Error::Mismatch(detail),
            RemoteError::Classification { c_trans, phase } => Error::Classification { c_trans, phase },
            RemoteError::Other { detail } => Error::Server {
                code: ErrorCode::Planner.name().into(),
                message: detail,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RemoteError>,
}

impl WireMessage {
    pub fn new<T: Serialize>(kind: Kind, seq: u64, payload: &T) -> Result<Self> {
        Ok(WireMessage {
            kind,
            seq,
            payload: serde_json::to_value(payload)?,
        })
    }

    pub fn bye(seq: u64) -> Self {
        WireMessage {
            kind: Kind::Bye,
            seq,
            payload: Value::Object(Default::default()),
        }
    }

    pub fn error(seq: u64, code: ErrorCode, message: impl Into<String>, error: Option<RemoteError>) -> Self {
        let p = ErrorPayload {
            code,
            message: message.into(),
            error,
        };
        WireMessage {
            kind: Kind::Error,
            seq,
            payload: serde_json::to_value(p).expect("error payload serialises"),
        }
    }

    pub fn payload_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.payload.clone())
            .map_err(|e| Error::Protocol(format!("bad {:?} payload: {e}", self.kind)))
    }
}

/// Canonical body: `serde_json::Value` keeps object keys sorted.
fn body(msg: &WireMessage) -> Result<Vec<u8>> {
    let v = serde_json::to_value(msg)?;
    Ok(serde_json::to_vec(&v)?)
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>> {
    let b = body(msg)?;
    if b.len() > MAX_FRAME {
        return Err(Error::InvalidParam(format!(
            "message body of {} bytes exceeds the {MAX_FRAME}-byte frame limit",
            b.len()
        )));
    }
    let mut out = Vec::with_capacity(4 + b.len());
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(&b);
    Ok(out)
}

/// Why a frame could not be read.
#[derive(Debug)]
pub enum FrameError {
    /// Stream ended cleanly between frames.
    Closed,
    Truncated,
    Oversize(usize),
    Malformed(String),
    Timeout,
    Io(io::Error),
}

impl FrameError {
    fn code(&self) -> ErrorCode {
        match self {
            FrameError::Oversize(_) => ErrorCode::Oversize,
            _ => ErrorCode::Frame,
        }
    }
}

impl std::fmt::Display for FrameError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrameError::Closed => write!(f, "stream closed"),
            FrameError::Truncated => write!(f, "truncated frame"),
            FrameError::Oversize(n) => write!(f, "frame of {n} bytes exceeds the {MAX_FRAME}-byte limit"),
            FrameError::Malformed(m) => write!(f, "malformed frame: {m}"),
            FrameError::Timeout => write!(f, "timed out waiting for a frame"),
            FrameError::Io(e) => write!(f, "{e}"),
        }
    }
}

fn io_frame_error(e: io::Error) -> FrameError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => FrameError::Timeout,
        _ => FrameError::Io(e),
    }
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], at_boundary: bool) -> std::result::Result<(), FrameError> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) if got == 0 && at_boundary => return Err(FrameError::Closed),
            Ok(0) => return Err(FrameError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_frame_error(e)),
        }
    }
    Ok(())
}

pub fn parse_body(b: &[u8]) -> std::result::Result<WireMessage, FrameError> {
    serde_json::from_slice(b).map_err(|e| FrameError::Malformed(e.to_string()))
}

pub fn read_message(r: &mut impl Read) -> std::result::Result<WireMessage, FrameError> {
    let mut len = [0u8; 4];
    read_exact_or(r, &mut len, true)?;
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(FrameError::Oversize(n));
    }
    let mut b = vec![0u8; n];
    read_exact_or(r, &mut b, false)?;
    parse_body(&b)
}

/// Decodes one complete frame; trailing or missing bytes are errors.
pub fn decode(frame: &[u8]) -> std::result::Result<WireMessage, FrameError> {
    if frame.len() < 4 {
        return Err(FrameError::Truncated);
    }
    let n = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    if n > MAX_FRAME {
        return Err(FrameError::Oversize(n));
    }
    match (frame.len() - 4).cmp(&n) {
        std::cmp::Ordering::Less => Err(FrameError::Truncated),
        std::cmp::Ordering::Greater => Err(FrameError::Malformed("bytes after the frame body".into())),
        std::cmp::Ordering::Equal => parse_body(&frame[4..]),
    }
}

pub fn write_message(w: &mut impl Write, msg: &WireMessage) -> Result<()> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Immutable planning context shared by every session.
#[derive(Debug, Clone)]
pub struct ServiceContext {
    pub params: VehicleParams,
    pub envelope: Envelope,
    pub cfg: PlannerConfig,
}

/// Handle to a running server.
pub struct ServerHandle {
    pub addr: std::net::SocketAddr,
    shutdown: Arc<AtomicBool>,
    thread: Option<thread::JoinHandle<()>>,
}

impl ServerHandle {
    /// Stops accepting sessions and waits for the accept loop to exit.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

const ACCEPT_POLL: Duration = Duration::from_millis(20);

/// Binds `endpoint` and serves sessions on a background thread.
pub fn spawn(endpoint: impl ToSocketAddrs, ctx: ServiceContext) -> Result<ServerHandle> {
    let listener = TcpListener::bind(endpoint)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    let ctx = Arc::new(ctx);
    let thread = thread::spawn(move || {
        if let Err(e) = serve(listener, ctx, flag) {
            log::error!("server stopped: {e}");
        }
    });
    Ok(ServerHandle {
        addr,
        shutdown,
        thread: Some(thread),
    })
}

/// Accept loop; returns once `shutdown` is set. Each session runs on its own
/// thread.
pub fn serve(listener: TcpListener, ctx: Arc<ServiceContext>, shutdown: Arc<AtomicBool>) -> Result<()> {
    listener.set_nonblocking(true)?;
    let mut sessions = Vec::new();
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("session from {peer}");
                stream.set_nonblocking(false)?;
                let ctx = ctx.clone();
                let flag = shutdown.clone();
                sessions.push(thread::spawn(move || {
                    if let Err(e) = session(stream, &ctx, &flag) {
                        log::warn!("session {peer} ended: {e}");
                    }
                }));
                sessions.retain(|h: &thread::JoinHandle<()>| !h.is_finished());
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(e) => return Err(e.into()),
        }
    }
    for h in sessions {
        let _ = h.join();
    }
    Ok(())
}

fn handle_request(ctx: &ServiceContext, msg: &WireMessage) -> std::result::Result<WireMessage, WireMessage> {
    let seq = msg.seq;
    let bad_payload = |e: Error| WireMessage::error(seq, ErrorCode::Frame, e.to_string(), None);
    let planner_error = |e: Error| {
        WireMessage::error(
            seq,
            ErrorCode::Planner,
            e.to_string(),
            Some(RemoteError::from_error(&e)),
        )
    };
    match msg.kind {
        Kind::PlanRequest => {
            let req: DecelPlanRequest = msg.payload_as().map_err(bad_payload)?;
            match planner::plan(&req, &ctx.params, &ctx.envelope, &ctx.cfg) {
                Ok(res) => WireMessage::new(Kind::PlanResponse, seq, &res).map_err(planner_error),
                Err(e) => Ok(planner_error(e)),
            }
        }
        Kind::EventDecisionRequest => {
            let req: DecisionRequest = msg.payload_as().map_err(bad_payload)?;
            match simroute::decide_event(&ctx.envelope, &req.spat, req.v_i, req.d_res, req.tol, req.max_n) {
                Ok(d) => WireMessage::new(Kind::EventDecisionResponse, seq, &d).map_err(planner_error),
                Err(e) => Ok(planner_error(e)),
            }
        }
        other => Err(WireMessage::error(
            seq,
            ErrorCode::Protocol,
            format!("{other:?} is not a request"),
            None,
        )),
    }
}

const SESSION_POLL: Duration = Duration::from_millis(200);

fn session(mut stream: TcpStream, ctx: &ServiceContext, shutdown: &AtomicBool) -> Result<()> {
    stream.set_read_timeout(Some(SESSION_POLL))?;
    let _ = stream.set_nodelay(true);
    let mut greeted = false;
    let mut last_seq: Option<u64> = None;
    loop {
        let msg = match read_message(&mut stream) {
            Ok(m) => m,
            Err(FrameError::Timeout) => {
                if shutdown.load(Ordering::SeqCst) {
                    return Ok(());
                }
                continue;
            }
            Err(FrameError::Closed) => return Ok(()),
            Err(FrameError::Io(e)) => return Err(e.into()),
            Err(e) => {
                let _ = write_message(&mut stream, &WireMessage::error(0, e.code(), e.to_string(), None));
                return Err(Error::Protocol(e.to_string()));
            }
        };
        let close = |stream: &mut TcpStream, reply: WireMessage| -> Result<()> {
            let text = reply.payload["message"].as_str().unwrap_or_default().to_string();
            write_message(stream, &reply)?;
            Err(Error::Protocol(text))
        };
        if last_seq.is_some_and(|s| msg.seq <= s) {
            return close(
                &mut stream,
                WireMessage::error(msg.seq, ErrorCode::Protocol, "sequence id did not increase", None),
            );
        }
        last_seq = Some(msg.seq);
        if !greeted {
            if msg.kind != Kind::Hello {
                return close(
                    &mut stream,
                    WireMessage::error(msg.seq, ErrorCode::Protocol, "session must start with HELLO", None),
                );
            }
            match msg.payload_as::<Hello>() {
                Ok(h) if h.version == PROTOCOL_VERSION => {
                    write_message(&mut stream, &WireMessage::new(Kind::Hello, msg.seq, &h)?)?;
                    greeted = true;
                    continue;
                }
                Ok(h) => {
                    return close(
                        &mut stream,
                        WireMessage::error(
                            msg.seq,
                            ErrorCode::Version,
                            format!(
                                "protocol version {} not supported (server speaks {PROTOCOL_VERSION})",
                                h.version
                            ),
                            None,
                        ),
                    )
                }
                Err(e) => {
                    return close(
                        &mut stream,
                        WireMessage::error(msg.seq, ErrorCode::Frame, e.to_string(), None),
                    )
                }
            }
        }
        match msg.kind {
            Kind::Bye => {
                write_message(&mut stream, &WireMessage::bye(msg.seq))?;
                return Ok(());
            }
            _ => match handle_request(ctx, &msg) {
                Ok(reply) => write_message(&mut stream, &reply)?,
                Err(reply) => return close(&mut stream, reply),
            },
        }
    }
}

/// Client side of one session.
pub struct Client {
    stream: TcpStream,
    seq: u64,
    /// Candidate settings sent with every event-decision request.
    pub tol: f64,
    pub max_n: usize,
}

fn transport(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Error::Timeout(e.to_string()),
        _ => Error::Transport(e.to_string()),
    }
}

impl Client {
    /// Connects and performs the HELLO handshake.
    pub fn connect(endpoint: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(transport)?
            .next()
            .ok_or_else(|| Error::Transport("endpoint resolves to no address".into()))?;
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(transport)?;
        stream.set_read_timeout(Some(timeout)).map_err(transport)?;
        stream.set_write_timeout(Some(timeout)).map_err(transport)?;
        let _ = stream.set_nodelay(true);
        let mut c = Client {
            stream,
            seq: 0,
            tol: crate::events::DEFAULT_TOL,
            max_n: crate::events::DEFAULT_MAX_N,
        };
        c.hello(PROTOCOL_VERSION)?;
        Ok(c)
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        let frame = encode(msg)?;
        self.stream.write_all(&frame).map_err(transport)?;
        self.stream.flush().map_err(transport)
    }

    fn receive(&mut self, seq: u64, expect: Kind) -> Result<WireMessage> {
        let msg = match read_message(&mut self.stream) {
            Ok(m) => m,
            Err(FrameError::Timeout) => return Err(Error::Timeout(format!("no reply to request {seq}"))),
            Err(FrameError::Closed | FrameError::Truncated) => {
                return Err(Error::Transport(format!(
                    "connection lost awaiting reply to request {seq}"
                )))
            }
            Err(FrameError::Io(e)) => return Err(transport(e)),
            Err(e) => return Err(Error::Protocol(e.to_string())),
        };
        if msg.seq != seq {
            return Err(Error::Protocol(format!(
                "reply carries sequence id {}, expected {seq}",
                msg.seq
            )));
        }
        if msg.kind == Kind::Error {
            let p: ErrorPayload = msg.payload_as()?;
            return Err(match p.error {
                Some(e) if p.code == ErrorCode::Planner => e.into_error(),
                _ => Error::Server {
                    code: p.code.name().into(),
                    message: p.message,
                },
            });
        }
        if msg.kind != expect {
            return Err(Error::Protocol(format!("expected {expect:?}, got {:?}", msg.kind)));
        }
        Ok(msg)
    }

    fn call<T: Serialize, R: DeserializeOwned>(&mut self, kind: Kind, expect: Kind, payload: &T) -> Result<R> {
        let seq = self.next_seq();
        self.send(&WireMessage::new(kind, seq, payload)?)?;
        self.receive(seq, expect)?.payload_as()
    }

    fn hello(&mut self, version: u32) -> Result<()> {
        let h: Hello = self.call(Kind::Hello, Kind::Hello, &Hello { version })?;
        if h.version != version {
            return Err(Error::Protocol(format!(
                "server answered HELLO with version {}",
                h.version
            )));
        }
        Ok(())
    }

    pub fn remote_plan(&mut self, request: &DecelPlanRequest) -> Result<PlanResult> {
        self.call(Kind::PlanRequest, Kind::PlanResponse, request)
    }

    pub fn remote_decide(&mut self, spat: &SpatState, v_i: f64, d_res: f64) -> Result<EventDecision> {
        let req = DecisionRequest {
            spat: *spat,
            v_i,
            d_res,
            tol: self.tol,
            max_n: self.max_n,
        };
        self.call(Kind::EventDecisionRequest, Kind::EventDecisionResponse, &req)
    }

    /// Sends every request before reading any reply.
    pub fn pipeline_plans(&mut self, requests: &[DecelPlanRequest]) -> Result<Vec<Result<PlanResult>>> {
        let mut seqs = Vec::with_capacity(requests.len());
        for r in requests {
            let seq = self.next_seq();
            self.send(&WireMessage::new(Kind::PlanRequest, seq, r)?)?;
            seqs.push(seq);
        }
        let mut out = Vec::with_capacity(seqs.len());
        for seq in seqs {
            match self.receive(seq, Kind::PlanResponse) {
                Ok(m) => out.push(m.payload_as()),
                Err(e) if e.is_fatal() => return Err(e),
                Err(e) => out.push(Err(e)),
            }
        }
        Ok(out)
    }

    /// Sends a raw message and returns the raw reply, for protocol tests.
    pub fn exchange_raw(&mut self, msg: &WireMessage) -> Result<WireMessage> {
        self.send(msg)?;
        match read_message(&mut self.stream) {
            Ok(m) => Ok(m),
            Err(FrameError::Timeout) => Err(Error::Timeout("no reply".into())),
            Err(FrameError::Io(e)) => Err(transport(e)),
            Err(e) => Err(Error::Transport(e.to_string())),
        }
    }

    pub fn close(mut self) -> Result<()> {
        let seq = self.next_seq();
        self.send(&WireMessage::bye(seq))?;
        self.receive(seq, Kind::Bye).map(|_| ())
    }
}

impl PlanService for Client {
    fn decide(&mut self, spat: &SpatState, v_i: f64, d_res: f64) -> Result<EventDecision> {
        self.remote_decide(spat, v_i, d_res)
    }

    fn plan(&mut self, request: &DecelPlanRequest) -> Result<PlanResult> {
        self.remote_plan(request)
    }
}
