//! Cloud-side endpoint: terminates duct sessions and mirrors their topics
//! and services onto the cloud bus.
//!
//! [`Bridge`] is a state machine with no I/O of its own. A driver feeds it
//! connection events and frames, and calls [`Bridge::poll`] whenever time
//! passes or the bus reports activity. The websocket server in
//! [`crate::runtime`] and the simulator in [`crate::netsim`] are both such
//! drivers.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::bus::{BusMessage, CallError, LocalBus, PendingCall, Publisher, Responder, ServiceHandle, Subscription, TopicName};
use crate::flow::{Admission, ThrottleCounters, ThrottleSpec, ThrottleState};
use crate::transport::Transport;
use crate::value::Value;
use crate::wire::{negotiate, Codec, CodecError, Encoding, Envelope, Frame, StatusLevel, DEFAULT_MAX_FRAME_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub listen_address: String,
    /// Websocket endpoint path.
    pub path: String,
    pub auth_token: Option<String>,
    pub max_sessions: usize,
    pub max_frame_size: usize,
    /// How long a disconnected session is kept for resume.
    pub session_retention_ms: u64,
    pub service_timeout_ms: u64,
    pub encodings: Vec<Encoding>,
    /// Outbound publishes pause while a connection's backlog exceeds this.
    pub high_water_bytes: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            listen_address: "127.0.0.1:9090".into(),
            path: "/duct".into(),
            auth_token: None,
            max_sessions: 64,
            max_frame_size: DEFAULT_MAX_FRAME_SIZE,
            session_retention_ms: 30_000,
            service_timeout_ms: 10_000,
            encodings: vec![Encoding::Cbor, Encoding::Json],
            high_water_bytes: 256 * 1024,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<(), BridgeError> {
        if self.max_sessions == 0 {
            return Err(BridgeError::Config("max_sessions must be at least 1".into()));
        }
        if self.encodings.is_empty() {
            return Err(BridgeError::Config("at least one encoding is required".into()));
        }
        if !self.path.starts_with('/') {
            return Err(BridgeError::Config("path must start with '/'".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BridgeError {
    #[error("authentication failed")]
    AuthFailure,
    #[error("invalid bridge configuration: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {reason}")]
    BindFailure { addr: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallRoute {
    /// The client called a cloud service; the answer goes back to it.
    ClientToBus,
    /// A cloud caller invoked a service the client offers.
    BusToClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingCallInfo {
    pub deadline_us: u64,
    pub route: CallRoute,
}

/// Snapshot of what the bridge holds on behalf of one duct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionState {
    pub session_id: String,
    pub encoding: Encoding,
    pub advertised: BTreeMap<String, String>,
    pub subscriptions: BTreeMap<String, ThrottleSpec>,
    pub offered_services: BTreeSet<String>,
    pub pending_calls: BTreeMap<String, PendingCallInfo>,
    pub last_activity_us: u64,
    pub attached: bool,
}

/// Whether the driver should keep a connection open after a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnControl {
    Keep,
    Close,
}

/// Lookup of live connections by id, supplied by the driver to
/// [`Bridge::poll`].
pub trait ConnectionSet {
    fn transport(&mut self, conn: ConnId) -> Option<&mut dyn Transport>;
}

impl<T: Transport> ConnectionSet for BTreeMap<ConnId, T> {
    fn transport(&mut self, conn: ConnId) -> Option<&mut dyn Transport> {
        self.get_mut(&conn).map(|t| t as &mut dyn Transport)
    }
}

struct SubRelay {
    sub: Subscription,
    spec: ThrottleSpec,
    type_name: String,
    compression: Encoding,
    throttle: ThrottleState<BusMessage>,
    seen_bus_drops: u64,
}

struct InboundCall {
    call: PendingCall,
    deadline_us: u64,
}

struct OutboundCall {
    responder: Responder,
    deadline_us: u64,
}

struct Session {
    id: String,
    encoding: Encoding,
    conn: Option<ConnId>,
    detached_at_us: Option<u64>,
    mark: u64,
    last_activity_us: u64,
    publishers: BTreeMap<String, Publisher>,
    subs: BTreeMap<String, SubRelay>,
    services: BTreeMap<String, ServiceHandle>,
    inbound: BTreeMap<String, InboundCall>,
    outbound: BTreeMap<String, OutboundCall>,
}

impl Session {
    fn snapshot(&self) -> SessionState {
        let mut pending = BTreeMap::new();
        for (id, c) in &self.inbound {
            pending.insert(
                id.clone(),
                PendingCallInfo {
                    deadline_us: c.deadline_us,
                    route: CallRoute::ClientToBus,
                },
            );
        }
        for (id, c) in &self.outbound {
            pending.insert(
                id.clone(),
                PendingCallInfo {
                    deadline_us: c.deadline_us,
                    route: CallRoute::BusToClient,
                },
            );
        }
        SessionState {
            session_id: self.id.clone(),
            encoding: self.encoding,
            advertised: self
                .publishers
                .iter()
                .map(|(t, p)| (t.clone(), p.type_name().to_owned()))
                .collect(),
            subscriptions: self.subs.iter().map(|(t, s)| (t.clone(), s.spec)).collect(),
            offered_services: self.services.keys().cloned().collect(),
            pending_calls: pending,
            last_activity_us: self.last_activity_us,
            attached: self.conn.is_some(),
        }
    }

    /// Releases every bus resource and fails calls waiting on the client.
    fn teardown(&mut self) {
        for (_, call) in std::mem::take(&mut self.outbound) {
            call.responder.fail(CallError::Timeout);
        }
        self.inbound.clear();
        self.publishers.clear();
        self.subs.clear();
        self.services.clear();
    }

    fn discard_relayed(&mut self) {
        for relay in self.subs.values_mut() {
            absorb_bus_drops(relay);
            for _ in relay.sub.drain() {
                relay.throttle.discard();
            }
            relay.throttle.discard_queue();
        }
    }
}

fn absorb_bus_drops(relay: &mut SubRelay) {
    let drops = relay.sub.dropped();
    for _ in relay.seen_bus_drops..drops {
        relay.throttle.discard();
    }
    relay.seen_bus_drops = drops;
}

struct ForwardRequest {
    session_id: String,
    service: String,
    args: Value,
    responder: Responder,
}

#[derive(Default)]
struct ConnState {
    session: Option<String>,
}

pub struct Bridge {
    cfg: BridgeConfig,
    bus: LocalBus,
    codec: Codec,
    conns: BTreeMap<ConnId, ConnState>,
    sessions: BTreeMap<String, Session>,
    forwards: Arc<Mutex<Vec<ForwardRequest>>>,
    pending_closes: Vec<ConnId>,
    next_conn: u64,
    next_mark: u64,
    next_call: u64,
}

impl std::fmt::Debug for Bridge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Bridge")
            .field("connections", &self.conns.len())
            .field("sessions", &self.sessions.len())
            .finish()
    }
}

impl Bridge {
    pub fn new(cfg: BridgeConfig, bus: LocalBus) -> Result<Self, BridgeError> {
        cfg.validate()?;
        Ok(Bridge {
            codec: Codec::new(cfg.max_frame_size),
            cfg,
            bus,
            conns: BTreeMap::new(),
            sessions: BTreeMap::new(),
            forwards: Arc::default(),
            pending_closes: Vec::new(),
            next_conn: 0,
            // marks are distinct from any a duct on the same bus might use
            next_mark: 1 << 32,
            next_call: 0,
        })
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.cfg
    }

    pub fn bus(&self) -> &LocalBus {
        &self.bus
    }

    /// Sessions currently bound to a connection.
    pub fn session_count(&self) -> usize {
        self.sessions.values().filter(|s| s.conn.is_some()).count()
    }

    pub fn retained_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn session(&self, id: &str) -> Option<SessionState> {
        self.sessions.get(id).map(Session::snapshot)
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.keys().cloned().collect()
    }

    /// Throttle counters of one relayed subscription.
    pub fn relay_counters(&self, session: &str, topic: &str) -> Option<(ThrottleCounters, usize)> {
        let relay = self.sessions.get(session)?.subs.get(topic)?;
        Some((relay.throttle.counters(), relay.throttle.queued()))
    }

    /// Admits a new websocket connection. `token` is the bearer token from
    /// the handshake.
    pub fn open(&mut self, token: Option<&str>, _now_us: u64) -> Result<ConnId, BridgeError> {
        if let Some(expected) = &self.cfg.auth_token {
            if token != Some(expected.as_str()) {
                warn!(target: "bridge", "rejected connection with bad or missing token");
                return Err(BridgeError::AuthFailure);
            }
        }
        self.next_conn += 1;
        let id = ConnId(self.next_conn);
        self.conns.insert(id, ConnState::default());
        Ok(id)
    }

    pub fn on_close(&mut self, conn: ConnId, now_us: u64) {
        let Some(state) = self.conns.remove(&conn) else {
            return;
        };
        if let Some(sid) = state.session {
            if let Some(s) = self.sessions.get_mut(&sid) {
                if s.conn == Some(conn) {
                    info!(target: "bridge", session = %sid, "session detached");
                    s.conn = None;
                    s.detached_at_us = Some(now_us);
                    s.discard_relayed();
                }
            }
        }
    }

    pub fn on_frame(
        &mut self,
        conn: ConnId,
        frame: &Frame,
        now_us: u64,
        tx: &mut dyn Transport,
    ) -> ConnControl {
        let Some(cstate) = self.conns.get(&conn) else {
            return ConnControl::Close;
        };
        let bound = cstate.session.clone();
        let decoded = self.codec.decode_frame(frame);
        let Some(sid) = bound else {
            return self.handshake(conn, frame.encoding(), decoded, now_us, tx);
        };
        let encoding = self.sessions.get(&sid).map_or(frame.encoding(), |s| s.encoding);
        match decoded {
            Ok(env) => {
                if let Some(s) = self.sessions.get_mut(&sid) {
                    s.last_activity_us = now_us;
                }
                self.on_envelope(&sid, env, now_us, tx);
                ConnControl::Keep
            }
            Err(CodecError::UnknownOp(op)) => {
                send(tx, &self.codec, &Envelope::status(StatusLevel::Warning, format!("unknown op {op:?}"), None), encoding);
                ConnControl::Keep
            }
            Err(e @ CodecError::FrameTooLarge { .. }) => {
                send(tx, &self.codec, &Envelope::status(StatusLevel::Error, e.to_string(), None), encoding);
                ConnControl::Close
            }
            Err(e) => {
                send(tx, &self.codec, &Envelope::status(StatusLevel::Error, e.to_string(), None), encoding);
                ConnControl::Keep
            }
        }
    }

    fn handshake(
        &mut self,
        conn: ConnId,
        frame_encoding: Encoding,
        decoded: Result<Envelope, CodecError>,
        now_us: u64,
        tx: &mut dyn Transport,
    ) -> ConnControl {
        let reject = |tx: &mut dyn Transport, codec: &Codec, msg: String| {
            send(tx, codec, &Envelope::status(StatusLevel::Error, msg, None), frame_encoding);
            ConnControl::Close
        };
        let (session_id, resume, encodings) = match decoded {
            Ok(Envelope::Hello {
                session_id,
                resume,
                encodings,
                ..
            }) => (session_id, resume, encodings),
            Ok(other) => return reject(tx, &self.codec, format!("expected hello, got {}", other.op())),
            Err(e) => return reject(tx, &self.codec, format!("expected hello: {e}")),
        };
        if session_id.is_empty() {
            return reject(tx, &self.codec, "empty session_id".into());
        }
        let client = encodings.unwrap_or_else(|| vec![frame_encoding]);
        let encoding = match negotiate(&client, &self.cfg.encodings) {
            Ok(e) => e,
            Err(e) => return reject(tx, &self.codec, e.to_string()),
        };

        let retention_us = self.cfg.session_retention_ms * 1000;
        let resumable = self.sessions.get(&session_id).is_some_and(|s| match s.detached_at_us {
            None => true,
            Some(at) => now_us <= at + retention_us,
        });
        let resumed = resume && resumable;
        if resumed {
            let s = self.sessions.get_mut(&session_id).expect("checked");
            if let Some(old) = s.conn.replace(conn) {
                self.conns.remove(&old);
                self.pending_closes.push(old);
            }
            s.detached_at_us = None;
            s.encoding = encoding;
            s.last_activity_us = now_us;
        } else {
            if let Some(mut old) = self.sessions.remove(&session_id) {
                if let Some(c) = old.conn {
                    self.conns.remove(&c);
                    self.pending_closes.push(c);
                }
                old.teardown();
            }
            if self.session_count() >= self.cfg.max_sessions {
                return reject(tx, &self.codec, "too many sessions".into());
            }
            self.next_mark += 1;
            self.sessions.insert(
                session_id.clone(),
                Session {
                    id: session_id.clone(),
                    encoding,
                    conn: Some(conn),
                    detached_at_us: None,
                    mark: self.next_mark,
                    last_activity_us: now_us,
                    publishers: BTreeMap::new(),
                    subs: BTreeMap::new(),
                    services: BTreeMap::new(),
                    inbound: BTreeMap::new(),
                    outbound: BTreeMap::new(),
                },
            );
        }
        if let Some(c) = self.conns.get_mut(&conn) {
            c.session = Some(session_id.clone());
        }
        info!(target: "bridge", session = %session_id, resumed, %encoding, "session established");
        send(
            tx,
            &self.codec,
            &Envelope::HelloAck {
                session_id,
                resumed,
                encoding,
            },
            encoding,
        );
        ConnControl::Keep
    }

    fn on_envelope(&mut self, sid: &str, env: Envelope, now_us: u64, tx: &mut dyn Transport) {
        let codec = self.codec;
        let timeout_us = self.cfg.service_timeout_ms * 1000;
        let bus = self.bus.clone();
        let forwards = self.forwards.clone();
        let Some(s) = self.sessions.get_mut(sid) else {
            return;
        };
        let enc = s.encoding;
        let status = |tx: &mut dyn Transport, level, msg: String, ref_id: Option<&str>| {
            send(tx, &codec, &Envelope::status(level, msg, ref_id.map(str::to_owned)), enc);
        };
        match env {
            Envelope::Advertise { topic, type_name } => {
                if s.publishers.get(&topic).is_some_and(|p| p.type_name() == type_name) {
                    return;
                }
                if let Some(old) = s.publishers.remove(&topic) {
                    old.unadvertise();
                }
                match bus.advertise_relayed(&topic, &type_name, s.mark) {
                    Ok(p) => {
                        s.publishers.insert(topic, p);
                    }
                    Err(e) => status(tx, StatusLevel::Error, e.to_string(), Some(&topic)),
                }
            }
            Envelope::Unadvertise { topic } => {
                s.publishers.remove(&topic);
            }
            Envelope::Publish { topic, msg, .. } => match s.publishers.get(&topic) {
                Some(p) => {
                    if let Err(e) = p.publish(msg) {
                        status(tx, StatusLevel::Error, e.to_string(), Some(&topic));
                    }
                }
                None => status(tx, StatusLevel::Error, "not advertised".into(), Some(&topic)),
            },
            Envelope::Subscribe {
                topic,
                type_name,
                throttle_rate,
                queue_length,
                compression,
            } => {
                if !TopicName::is_valid(&topic) {
                    status(tx, StatusLevel::Error, format!("invalid topic name {topic:?}"), Some(&topic));
                    return;
                }
                let spec = ThrottleSpec::new(throttle_rate.max(0) as u64, queue_length.max(1) as usize);
                if let Some(relay) = s.subs.get_mut(&topic) {
                    if relay.spec.queue_length == spec.queue_length {
                        relay.spec = spec;
                        relay.type_name = type_name;
                        relay.compression = compression;
                        return;
                    }
                }
                match bus.subscribe(&topic, spec.queue_length) {
                    Ok(sub) => {
                        s.subs.insert(
                            topic,
                            SubRelay {
                                sub,
                                spec,
                                type_name,
                                compression,
                                throttle: ThrottleState::new(),
                                seen_bus_drops: 0,
                            },
                        );
                    }
                    Err(e) => status(tx, StatusLevel::Error, e.to_string(), Some(&topic)),
                }
            }
            Envelope::Unsubscribe { topic } => {
                s.subs.remove(&topic);
            }
            Envelope::AdvertiseService { service, type_name } => {
                if s.services.contains_key(&service) {
                    return;
                }
                let session_id = s.id.clone();
                let name = service.clone();
                let handler = Arc::new(move |args, responder| {
                    forwards.lock().push(ForwardRequest {
                        session_id: session_id.clone(),
                        service: name.clone(),
                        args,
                        responder,
                    });
                });
                match bus.register_service(&service, &type_name, handler) {
                    Ok(h) => {
                        s.services.insert(service, h);
                    }
                    Err(e) => status(tx, StatusLevel::Error, e.to_string(), Some(&service)),
                }
            }
            Envelope::UnadvertiseService { service } => {
                s.services.remove(&service);
            }
            Envelope::CallService { service, args, id } => {
                if s.inbound.contains_key(&id) {
                    status(tx, StatusLevel::Error, "duplicate call id".into(), Some(&id));
                    return;
                }
                match bus.begin_call(&service, args) {
                    Ok(call) => match call.try_take() {
                        Some(result) => send(tx, &codec, &service_response(id, result), enc),
                        None => {
                            s.inbound.insert(
                                id,
                                InboundCall {
                                    call,
                                    deadline_us: now_us + timeout_us,
                                },
                            );
                        }
                    },
                    Err(e) => send(tx, &codec, &service_response(id, Err(e)), enc),
                }
            }
            Envelope::ServiceResponse { id, values, result } => match s.outbound.remove(&id) {
                Some(call) => {
                    if result {
                        call.responder.respond(Ok(values));
                    } else {
                        call.responder.respond(Err(error_text(&values)));
                    }
                }
                None => status(tx, StatusLevel::Warning, "no pending call with this id".into(), Some(&id)),
            },
            Envelope::Ping { nonce } => send(tx, &codec, &Envelope::Pong { nonce }, enc),
            Envelope::Pong { .. } => {}
            Envelope::Status { level, msg, ref_id } => {
                debug!(target: "bridge", session = %sid, level = level.as_str(), ?ref_id, "client status: {msg}");
            }
            Envelope::Hello { .. } | Envelope::HelloAck { .. } => {
                status(tx, StatusLevel::Warning, "session already established".into(), None);
            }
        }
    }

    /// Advances timers and moves bus traffic onto connections. Returns
    /// connections the driver should close.
    pub fn poll(&mut self, now_us: u64, links: &mut dyn ConnectionSet) -> Vec<ConnId> {
        let codec = self.codec;
        let high_water = self.cfg.high_water_bytes;
        let retention_us = self.cfg.session_retention_ms * 1000;
        let timeout_us = self.cfg.service_timeout_ms * 1000;

        let forwards: Vec<ForwardRequest> = std::mem::take(&mut *self.forwards.lock());
        for req in forwards {
            let Some(s) = self.sessions.get_mut(&req.session_id) else {
                req.responder.fail(CallError::NoSuchService(req.service));
                continue;
            };
            let Some(tx) = s.conn.and_then(|c| links.transport(c)) else {
                req.responder.respond(Err("providing session is disconnected".into()));
                continue;
            };
            self.next_call += 1;
            let id = format!("bridge-{}", self.next_call);
            let env = Envelope::CallService {
                service: req.service,
                args: req.args,
                id: id.clone(),
            };
            match codec.encode_frame(&env, s.encoding).map(|frame| tx.send(frame)) {
                Ok(Ok(())) => {
                    s.outbound.insert(
                        id,
                        OutboundCall {
                            responder: req.responder,
                            deadline_us: now_us + timeout_us,
                        },
                    );
                }
                Ok(Err(_)) => req.responder.respond(Err("providing session is disconnected".into())),
                Err(e) => req.responder.respond(Err(e.to_string())),
            }
        }

        let expired: Vec<String> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.detached_at_us.is_some_and(|at| now_us >= at + retention_us))
            .map(|(id, _)| id.clone())
            .collect();
        for id in expired {
            if let Some(mut s) = self.sessions.remove(&id) {
                info!(target: "bridge", session = %id, "retention expired, session released");
                s.teardown();
            }
        }

        for s in self.sessions.values_mut() {
            let timed_out: Vec<String> = s
                .outbound
                .iter()
                .filter(|(_, c)| now_us >= c.deadline_us)
                .map(|(id, _)| id.clone())
                .collect();
            for id in timed_out {
                if let Some(c) = s.outbound.remove(&id) {
                    c.responder.fail(CallError::Timeout);
                }
            }

            let tx = match s.conn.and_then(|c| links.transport(c)) {
                Some(tx) => tx,
                None => {
                    s.discard_relayed();
                    // answers to a detached client have nowhere to go
                    s.inbound.retain(|_, c| now_us < c.deadline_us);
                    continue;
                }
            };

            let done: Vec<String> = s
                .inbound
                .iter()
                .filter(|(_, c)| now_us >= c.deadline_us)
                .map(|(id, _)| id.clone())
                .collect();
            for id in done {
                s.inbound.remove(&id);
                send(tx, &codec, &service_response(id, Err(CallError::Timeout)), s.encoding);
            }
            let mut answered = Vec::new();
            for (id, c) in &s.inbound {
                if let Some(result) = c.call.try_take() {
                    answered.push((id.clone(), result));
                }
            }
            for (id, result) in answered {
                s.inbound.remove(&id);
                send(tx, &codec, &service_response(id, result), s.encoding);
            }

            for (topic, relay) in s.subs.iter_mut() {
                absorb_bus_drops(relay);
                let mut fresh = Vec::new();
                while let Some(m) = relay.sub.try_recv() {
                    if m.provenance != Some(s.mark) {
                        fresh.push(m);
                    }
                }
                // a burst larger than the bus queue was already counted
                absorb_bus_drops(relay);
                let emit = |m: BusMessage, tx: &mut dyn Transport| {
                    let env = Envelope::Publish {
                        topic: topic.clone(),
                        msg: m.payload,
                        seq: m.seq,
                    };
                    match codec.encode_frame(&env, relay.compression) {
                        Ok(frame) => {
                            let _ = tx.send(frame);
                        }
                        Err(e) => warn!(target: "bridge", %topic, "dropping unencodable message: {e}"),
                    }
                };
                while tx.backlog() <= high_water {
                    let out = relay.throttle.tick_limited(&relay.spec, now_us, 1);
                    let Some(m) = out.into_iter().next() else { break };
                    emit(m, tx);
                }
                for m in fresh {
                    let adm = if tx.backlog() <= high_water {
                        relay.throttle.admit(&relay.spec, m, now_us)
                    } else {
                        relay.throttle.enqueue(&relay.spec, m)
                    };
                    if let Admission::Emit(m) = adm {
                        emit(m, tx);
                    }
                }
            }
        }
        std::mem::take(&mut self.pending_closes)
    }

    /// Earliest time at which [`poll`](Self::poll) has timer work to do.
    pub fn next_wakeup(&self) -> Option<u64> {
        let retention_us = self.cfg.session_retention_ms * 1000;
        let mut next: Option<u64> = None;
        let mut consider = |t: u64| next = Some(next.map_or(t, |n: u64| n.min(t)));
        for s in self.sessions.values() {
            if let Some(at) = s.detached_at_us {
                consider(at + retention_us);
            }
            for c in s.inbound.values() {
                consider(c.deadline_us);
            }
            for c in s.outbound.values() {
                consider(c.deadline_us);
            }
            if s.conn.is_some() {
                for r in s.subs.values() {
                    if let Some(t) = r.throttle.next_ready_us(&r.spec) {
                        consider(t);
                    }
                }
            }
        }
        if !self.forwards.lock().is_empty() {
            consider(0);
        }
        next
    }
}

fn service_response(id: String, result: Result<Value, CallError>) -> Envelope {
    match result {
        Ok(values) => Envelope::ServiceResponse {
            id,
            values,
            result: true,
        },
        Err(e) => Envelope::ServiceResponse {
            id,
            values: Value::Text(e.to_string()),
            result: false,
        },
    }
}

/// Best-effort text of a failed service response.
pub(crate) fn error_text(values: &Value) -> String {
    match values {
        Value::Text(s) => s.clone(),
        other => format!("{other:?}"),
    }
}

fn send(tx: &mut dyn Transport, codec: &Codec, env: &Envelope, encoding: Encoding) {
    match codec.encode_frame(env, encoding) {
        Ok(frame) => {
            let _ = tx.send(frame);
        }
        Err(e) => warn!(target: "bridge", op = %env.op(), "cannot encode reply: {e}"),
    }
}
