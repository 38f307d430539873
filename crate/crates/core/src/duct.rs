//! Edge-side relay: one outbound session to a bridge, topics and services
//! relayed in both directions, reconnect with resync.
//!
//! Like [`crate::bridge::Bridge`], [`Duct`] performs no I/O. The driver
//! dials when [`Duct::poll`] returns [`DuctRequest::Connect`], reports the
//! outcome, feeds received frames, and keeps polling.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::bridge::error_text;
use crate::bus::{BusError, BusMessage, CallError, LocalBus, PendingCall, Publisher, Responder, ServiceHandle, Subscription, TopicName};
use crate::flow::{Admission, ThrottleCounters, ThrottleSpec, ThrottleState};
use crate::transport::Transport;
use crate::value::Value;
use crate::wire::{Codec, CodecError, Encoding, Envelope, Frame, StatusLevel, PROTOCOL_VERSION};
#[cfg(test)]
use crate::wire::Op;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DuctError {
    #[error("invalid duct configuration: {0}")]
    ConfigInvalid(String),
    #[error("no relay configured for {0}")]
    UnknownRelay(String),
    #[error(transparent)]
    Bus(#[from] BusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaySpec {
    pub topic: String,
    #[serde(rename = "type")]
    pub type_name: String,
    /// Minimum interval between forwarded messages, ms. 0 is unlimited.
    #[serde(default)]
    pub throttle_rate: u64,
    #[serde(default = "default_queue_length")]
    pub queue_length: usize,
    #[serde(default = "default_true")]
    pub enabled: bool,
}

impl RelaySpec {
    pub fn new(topic: &str, type_name: &str) -> Self {
        RelaySpec {
            topic: topic.to_owned(),
            type_name: type_name.to_owned(),
            throttle_rate: 0,
            queue_length: default_queue_length(),
            enabled: true,
        }
    }

    pub fn throttled(mut self, throttle_rate_ms: u64, queue_length: usize) -> Self {
        self.throttle_rate = throttle_rate_ms;
        self.queue_length = queue_length;
        self
    }

    pub fn disabled(mut self) -> Self {
        self.enabled = false;
        self
    }

    pub fn throttle_spec(&self) -> ThrottleSpec {
        ThrottleSpec::new(self.throttle_rate, self.queue_length.max(1))
    }
}

fn default_queue_length() -> usize {
    10
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconnectPolicy {
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
    pub jitter_fraction: f64,
    pub give_up_after_ms: Option<u64>,
}

impl Default for ReconnectPolicy {
    fn default() -> Self {
        ReconnectPolicy {
            initial_backoff_ms: 500,
            multiplier: 2.0,
            max_backoff_ms: 30_000,
            jitter_fraction: 0.1,
            give_up_after_ms: None,
        }
    }
}

impl ReconnectPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.initial_backoff_ms == 0 {
            return Err("reconnect.initial_backoff_ms must be > 0".into());
        }
        if self.max_backoff_ms < self.initial_backoff_ms {
            return Err("reconnect.max_backoff_ms must be >= initial_backoff_ms".into());
        }
        if !(self.multiplier >= 1.0 && self.multiplier.is_finite()) {
            return Err("reconnect.multiplier must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return Err("reconnect.jitter_fraction must be in [0, 1)".into());
        }
        Ok(())
    }

    /// Capped exponential delay before jitter, in milliseconds.
    pub fn base_delay_ms(&self, attempt: u32) -> f64 {
        let raw = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt.min(1024) as i32);
        raw.min(self.max_backoff_ms as f64)
    }

    /// Delay before reconnect attempt `attempt` (0-based).
    pub fn next_backoff(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let base = self.base_delay_ms(attempt);
        let factor = if self.jitter_fraction > 0.0 {
            rng.gen_range(1.0 - self.jitter_fraction..=1.0 + self.jitter_fraction)
        } else {
            1.0
        };
        Duration::from_secs_f64(base * factor / 1000.0)
    }

    /// Largest delay [`next_backoff`](Self::next_backoff) can return.
    pub fn max_delay(&self, attempt: u32) -> Duration {
        Duration::from_secs_f64(self.base_delay_ms(attempt) * (1.0 + self.jitter_fraction) / 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeepaliveConfig {
    pub interval_ms: u64,
    /// Unanswered pings tolerated before the link is declared dead.
    pub max_missed: u32,
}

impl Default for KeepaliveConfig {
    fn default() -> Self {
        KeepaliveConfig {
            interval_ms: 5_000,
            max_missed: 3,
        }
    }
}

/// Relay manifest of one duct. Loadable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DuctConfig {
    pub bridge_url: String,
    /// Generated (128-bit random hex) when absent.
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub auth_token: Option<String>,
    /// Preference order.
    #[serde(default = "default_encodings")]
    pub encodings: Vec<Encoding>,
    /// Bridge bus to local bus.
    #[serde(default)]
    pub remote_topics: Vec<RelaySpec>,
    /// Local bus to bridge bus.
    #[serde(default)]
    pub local_topics: Vec<RelaySpec>,
    /// Served at the bridge, callable locally.
    #[serde(default)]
    pub remote_services: Vec<String>,
    /// Served locally, exposed at the bridge.
    #[serde(default)]
    pub local_services: Vec<String>,
    #[serde(default)]
    pub reconnect: ReconnectPolicy,
    #[serde(default)]
    pub keepalive: KeepaliveConfig,
    #[serde(default = "default_service_timeout_ms")]
    pub service_timeout_ms: u64,
    /// Outbound publishes pause while the link backlog exceeds this.
    #[serde(default = "default_high_water")]
    pub high_water_bytes: usize,
}

fn default_encodings() -> Vec<Encoding> {
    vec![Encoding::Cbor, Encoding::Json]
}

fn default_service_timeout_ms() -> u64 {
    10_000
}

fn default_high_water() -> usize {
    64 * 1024
}

impl DuctConfig {
    pub fn new(bridge_url: &str) -> Self {
        DuctConfig {
            bridge_url: bridge_url.to_owned(),
            session_id: None,
            auth_token: None,
            encodings: default_encodings(),
            remote_topics: Vec::new(),
            local_topics: Vec::new(),
            remote_services: Vec::new(),
            local_services: Vec::new(),
            reconnect: ReconnectPolicy::default(),
            keepalive: KeepaliveConfig::default(),
            service_timeout_ms: default_service_timeout_ms(),
            high_water_bytes: default_high_water(),
        }
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self, DuctError> {
        let cfg: DuctConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| DuctError::ConfigInvalid(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| DuctError::ConfigInvalid(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, DuctError> {
        let text = fs::read_to_string(path)
            .map_err(|e| DuctError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), DuctError> {
        let bad = |m: String| Err(DuctError::ConfigInvalid(m));
        if !(self.bridge_url.starts_with("ws://") || self.bridge_url.starts_with("wss://")) {
            return bad(format!("bridge_url must be a ws:// or wss:// URL, got {:?}", self.bridge_url));
        }
        if self.encodings.is_empty() {
            return bad("encodings must not be empty".into());
        }
        if self.session_id.as_deref() == Some("") {
            return bad("session_id must not be empty".into());
        }
        if let Err(m) = self.reconnect.validate() {
            return bad(m);
        }
        if self.keepalive.interval_ms == 0 || self.keepalive.max_missed == 0 {
            return bad("keepalive interval_ms and max_missed must be > 0".into());
        }
        let mut seen = BTreeSet::new();
        for r in self.local_topics.iter().chain(&self.remote_topics) {
            if !TopicName::is_valid(&r.topic) {
                return bad(format!("invalid relay topic {:?}", r.topic));
            }
            if r.queue_length == 0 {
                return bad(format!("relay {} has queue_length 0", r.topic));
            }
            if !seen.insert(r.topic.as_str()) {
                return bad(format!("topic {} is relayed more than once", r.topic));
            }
        }
        let mut services = BTreeSet::new();
        for s in self.local_services.iter().chain(&self.remote_services) {
            if !TopicName::is_valid(s) {
                return bad(format!("invalid service name {s:?}"));
            }
            if !services.insert(s.as_str()) {
                return bad(format!("service {s} is relayed more than once"));
            }
        }
        Ok(())
    }

    pub fn relay(&self, topic: &str) -> Option<&RelaySpec> {
        self.local_topics
            .iter()
            .chain(&self.remote_topics)
            .find(|r| r.topic == topic)
    }

    pub fn relay_topics(&self) -> impl Iterator<Item = &str> {
        self.local_topics
            .iter()
            .chain(&self.remote_topics)
            .map(|r| r.topic.as_str())
    }
}

/// What the duct wants the bridge to hold for it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PeerItem {
    Advertise(String),
    Subscribe(String),
    Service(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Waiting to (re)connect.
    Idle,
    /// A dial is in progress.
    Connecting,
    /// Connected, hello sent.
    AwaitingAck,
    Live,
    /// `give_up_after_ms` elapsed without reconnecting.
    GaveUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DuctRequest {
    Connect,
    Close,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DuctEvent {
    Established { resumed: bool, replayed: usize },
    Disconnected { reason: String },
    ConnectFailed { attempt: u32 },
    GaveUp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RelayStats {
    pub enabled: bool,
    pub throttle: ThrottleCounters,
    pub queued: usize,
    /// Messages not forwarded because the relay was disabled.
    pub suppressed: u64,
    /// Encoded size of the publish frames those messages would have used.
    pub suppressed_bytes: u64,
}

struct LocalRelay {
    spec: RelaySpec,
    sub: Subscription,
    throttle: ThrottleState<BusMessage>,
    seen_bus_drops: u64,
    suppressed: u64,
    suppressed_bytes: u64,
}

struct RemoteRelay {
    spec: RelaySpec,
    publisher: Publisher,
}

struct ProxyCall {
    service: String,
    args: Value,
    responder: Responder,
}

struct OutgoingCall {
    responder: Responder,
    deadline_us: u64,
}

struct IncomingCall {
    call: PendingCall,
    deadline_us: u64,
}

pub struct Duct {
    cfg: DuctConfig,
    bus: LocalBus,
    codec: Codec,
    rng: ChaCha8Rng,
    session_id: String,
    mark: u64,
    phase: Phase,
    had_session: bool,
    encoding: Encoding,
    attempt: u32,
    retry_at_us: u64,
    outage_since_us: Option<u64>,
    phase_since_us: u64,
    next_ping_us: u64,
    unanswered_pings: u32,
    ping_nonce: i64,
    local: BTreeMap<String, LocalRelay>,
    remote: BTreeMap<String, RemoteRelay>,
    _proxies: Vec<ServiceHandle>,
    proxy_queue: Arc<Mutex<Vec<ProxyCall>>>,
    outgoing: BTreeMap<String, OutgoingCall>,
    incoming: BTreeMap<String, IncomingCall>,
    next_call: u64,
    peer: BTreeSet<PeerItem>,
    // Items whose last control envelope the bridge has not yet confirmed,
    // with the ping nonce current when it was queued. A pong for a later
    // ping proves delivery; anything still here at resume is re-sent.
    unconfirmed: BTreeMap<PeerItem, i64>,
    control: VecDeque<Envelope>,
    events: Vec<DuctEvent>,
}

impl std::fmt::Debug for Duct {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Duct")
            .field("session_id", &self.session_id)
            .field("phase", &self.phase)
            .finish()
    }
}

/// Provenance marks of ducts; distinct from bridge marks.
static NEXT_MARK: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

impl Duct {
    /// Validates `cfg` and installs its relays on `bus`. `seed` drives
    /// session id generation and backoff jitter.
    pub fn new(cfg: DuctConfig, bus: LocalBus, seed: u64) -> Result<Self, DuctError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let session_id = cfg.session_id.clone().unwrap_or_else(|| {
            let mut id = [0u8; 16];
            rng.fill_bytes(&mut id);
            id.iter().map(|b| format!("{b:02x}")).collect()
        });
        let mark = NEXT_MARK.fetch_add(1, std::sync::atomic::Ordering::Relaxed);

        let mut local = BTreeMap::new();
        for spec in &cfg.local_topics {
            let sub = bus.subscribe(&spec.topic, spec.queue_length)?;
            local.insert(
                spec.topic.clone(),
                LocalRelay {
                    spec: spec.clone(),
                    sub,
                    throttle: ThrottleState::new(),
                    seen_bus_drops: 0,
                    suppressed: 0,
                    suppressed_bytes: 0,
                },
            );
        }
        let mut remote = BTreeMap::new();
        for spec in &cfg.remote_topics {
            let publisher = bus.advertise_relayed(&spec.topic, &spec.type_name, mark)?;
            remote.insert(
                spec.topic.clone(),
                RemoteRelay {
                    spec: spec.clone(),
                    publisher,
                },
            );
        }
        let proxy_queue: Arc<Mutex<Vec<ProxyCall>>> = Arc::default();
        let mut proxies = Vec::new();
        for name in &cfg.remote_services {
            let q = proxy_queue.clone();
            let service = name.clone();
            proxies.push(bus.register_service(
                name,
                "pubduct/remote",
                Arc::new(move |args, responder| {
                    q.lock().push(ProxyCall {
                        service: service.clone(),
                        args,
                        responder,
                    })
                }),
            )?);
        }
        Ok(Duct {
            codec: Codec::default(),
            encoding: cfg.encodings[0],
            cfg,
            bus,
            rng,
            session_id,
            mark,
            phase: Phase::Idle,
            had_session: false,
            attempt: 0,
            retry_at_us: 0,
            outage_since_us: None,
            phase_since_us: 0,
            next_ping_us: 0,
            unanswered_pings: 0,
            ping_nonce: 0,
            local,
            remote,
            _proxies: proxies,
            proxy_queue,
            outgoing: BTreeMap::new(),
            incoming: BTreeMap::new(),
            next_call: 0,
            peer: BTreeSet::new(),
            unconfirmed: BTreeMap::new(),
            control: VecDeque::new(),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &DuctConfig {
        &self.cfg
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_live(&self) -> bool {
        self.phase == Phase::Live
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    /// Provenance mark stamped on messages this duct injects locally.
    pub fn mark(&self) -> u64 {
        self.mark
    }

    pub fn take_events(&mut self) -> Vec<DuctEvent> {
        std::mem::take(&mut self.events)
    }

    /// What the duct believes the bridge currently holds for it.
    pub fn peer_view(&self) -> &BTreeSet<PeerItem> {
        &self.peer
    }

    /// The enabled subset of the configuration, as peer items.
    pub fn desired_view(&self) -> BTreeSet<PeerItem> {
        let mut out = BTreeSet::new();
        for r in self.local.values().filter(|r| r.spec.enabled) {
            out.insert(PeerItem::Advertise(r.spec.topic.clone()));
        }
        for r in self.remote.values().filter(|r| r.spec.enabled) {
            out.insert(PeerItem::Subscribe(r.spec.topic.clone()));
        }
        for s in &self.cfg.local_services {
            out.insert(PeerItem::Service(s.clone()));
        }
        out
    }

    pub fn relay_enabled(&self, topic: &str) -> Option<bool> {
        self.local
            .get(topic)
            .map(|r| r.spec.enabled)
            .or_else(|| self.remote.get(topic).map(|r| r.spec.enabled))
    }

    pub fn relay_stats(&self, topic: &str) -> Option<RelayStats> {
        if let Some(r) = self.local.get(topic) {
            return Some(RelayStats {
                enabled: r.spec.enabled,
                throttle: r.throttle.counters(),
                queued: r.throttle.queued(),
                suppressed: r.suppressed,
                suppressed_bytes: r.suppressed_bytes,
            });
        }
        self.remote.get(topic).map(|r| RelayStats {
            enabled: r.spec.enabled,
            ..RelayStats::default()
        })
    }

    /// Turns a relay on or off. Returns whether anything changed. The peer
    /// is told at the next [`poll`](Self::poll) if the session is live,
    /// otherwise at the next resync.
    pub fn set_relay_enabled(&mut self, topic: &str, enabled: bool) -> Result<bool, DuctError> {
        let flag = if let Some(r) = self.local.get_mut(topic) {
            &mut r.spec.enabled
        } else if let Some(r) = self.remote.get_mut(topic) {
            &mut r.spec.enabled
        } else {
            return Err(DuctError::UnknownRelay(topic.to_owned()));
        };
        if *flag == enabled {
            return Ok(false);
        }
        *flag = enabled;
        debug!(target: "duct", %topic, enabled, "relay toggled");
        if !enabled {
            let encoding = self.encoding;
            if let Some(r) = self.local.get_mut(topic) {
                for m in r.throttle.discard_queue() {
                    count_suppressed(r, &self.codec, encoding, m);
                }
            }
        }
        if self.phase == Phase::Live {
            self.sync_peer();
        }
        Ok(true)
    }

    fn item_envelope(&self, item: &PeerItem, add: bool) -> Envelope {
        match (item, add) {
            (PeerItem::Advertise(t), true) => Envelope::Advertise {
                topic: t.clone(),
                type_name: self.local[t].spec.type_name.clone(),
            },
            (PeerItem::Advertise(t), false) => Envelope::Unadvertise { topic: t.clone() },
            (PeerItem::Subscribe(t), true) => {
                let spec = &self.remote[t].spec;
                Envelope::Subscribe {
                    topic: t.clone(),
                    type_name: spec.type_name.clone(),
                    throttle_rate: spec.throttle_rate as i64,
                    queue_length: spec.queue_length as i64,
                    compression: self.encoding,
                }
            }
            (PeerItem::Subscribe(t), false) => Envelope::Unsubscribe { topic: t.clone() },
            (PeerItem::Service(s), true) => Envelope::AdvertiseService {
                service: s.clone(),
                type_name: self.bus.service_type(s).unwrap_or_default(),
            },
            (PeerItem::Service(s), false) => Envelope::UnadvertiseService { service: s.clone() },
        }
    }

    /// Queues the envelopes that take the peer from its current view to the
    /// desired one. Returns how many were queued.
    fn sync_peer(&mut self) -> usize {
        let desired = self.desired_view();
        let removals: Vec<PeerItem> = self.peer.difference(&desired).cloned().collect();
        let additions: Vec<PeerItem> = desired.difference(&self.peer).cloned().collect();
        for item in &removals {
            let env = self.item_envelope(item, false);
            self.control.push_back(env);
        }
        for item in &additions {
            let env = self.item_envelope(item, true);
            self.control.push_back(env);
        }
        for item in removals.iter().chain(&additions) {
            self.unconfirmed.insert(item.clone(), self.ping_nonce);
        }
        self.peer = desired;
        removals.len() + additions.len()
    }

    /// The dial requested by [`DuctRequest::Connect`] succeeded.
    pub fn on_connected(&mut self, now_us: u64, tx: &mut dyn Transport) {
        self.phase = Phase::AwaitingAck;
        self.phase_since_us = now_us;
        let hello = Envelope::Hello {
            session_id: self.session_id.clone(),
            resume: self.had_session,
            version: PROTOCOL_VERSION,
            encodings: Some(self.cfg.encodings.clone()),
        };
        match self.codec.encode_frame(&hello, self.cfg.encodings[0]) {
            Ok(frame) => {
                let _ = tx.send(frame);
            }
            Err(e) => warn!(target: "duct", "cannot encode hello: {e}"),
        }
    }

    /// The dial requested by [`DuctRequest::Connect`] failed.
    pub fn on_connect_failed(&mut self, now_us: u64) {
        if self.phase != Phase::Connecting {
            return;
        }
        self.events.push(DuctEvent::ConnectFailed {
            attempt: self.attempt,
        });
        self.schedule_retry(now_us);
    }

    pub fn on_disconnected(&mut self, now_us: u64, reason: &str) {
        if matches!(self.phase, Phase::Idle | Phase::GaveUp) {
            return;
        }
        let was_up = matches!(self.phase, Phase::Live | Phase::AwaitingAck);
        info!(target: "duct", session = %self.session_id, "disconnected: {reason}");
        self.events.push(DuctEvent::Disconnected {
            reason: reason.to_owned(),
        });
        self.control.clear();
        for r in self.local.values_mut() {
            r.throttle.discard_queue();
        }
        if was_up {
            self.attempt = 0;
        }
        self.schedule_retry(now_us);
    }

    fn schedule_retry(&mut self, now_us: u64) {
        let since = *self.outage_since_us.get_or_insert(now_us);
        if let Some(limit) = self.cfg.reconnect.give_up_after_ms {
            if now_us.saturating_sub(since) >= limit * 1000 {
                self.phase = Phase::GaveUp;
                self.events.push(DuctEvent::GaveUp);
                warn!(target: "duct", "giving up on reconnecting");
                return;
            }
        }
        let delay = self.cfg.reconnect.next_backoff(self.attempt, &mut self.rng);
        self.attempt += 1;
        self.retry_at_us = now_us + delay.as_micros() as u64;
        self.phase = Phase::Idle;
        self.phase_since_us = now_us;
    }

    /// Handles one received frame. Returns `Close` if the session must end.
    pub fn on_frame(&mut self, frame: &Frame, now_us: u64, tx: &mut dyn Transport) -> Option<DuctRequest> {
        let env = match self.codec.decode_frame(frame) {
            Ok(env) => env,
            Err(CodecError::UnknownOp(op)) => {
                debug!(target: "duct", "ignoring unknown op {op}");
                return None;
            }
            Err(e) => {
                warn!(target: "duct", "undecodable frame: {e}");
                return None;
            }
        };
        match self.phase {
            Phase::AwaitingAck => match env {
                Envelope::HelloAck {
                    session_id,
                    resumed,
                    encoding,
                } if session_id == self.session_id => {
                    self.establish(resumed, encoding, now_us);
                    None
                }
                Envelope::Status { level, msg, .. } => {
                    warn!(target: "duct", level = level.as_str(), "handshake refused: {msg}");
                    Some(DuctRequest::Close)
                }
                other => {
                    warn!(target: "duct", op = %other.op(), "unexpected frame during handshake");
                    Some(DuctRequest::Close)
                }
            },
            Phase::Live => {
                self.on_envelope(env, now_us, tx);
                None
            }
            _ => None,
        }
    }

    fn establish(&mut self, resumed: bool, encoding: Encoding, now_us: u64) {
        self.phase = Phase::Live;
        self.phase_since_us = now_us;
        self.encoding = encoding;
        self.had_session = true;
        self.attempt = 0;
        self.outage_since_us = None;
        self.unanswered_pings = 0;
        self.next_ping_us = now_us + self.cfg.keepalive.interval_ms * 1000;
        if resumed {
            // the bridge kept our state, but changes sent just before the
            // break may never have reached it: make sync_peer repeat them
            let desired = self.desired_view();
            for item in std::mem::take(&mut self.unconfirmed).into_keys() {
                if desired.contains(&item) {
                    self.peer.remove(&item);
                } else {
                    self.peer.insert(item);
                }
            }
        } else {
            self.peer.clear();
            self.unconfirmed.clear();
        }
        let replayed = self.sync_peer();
        self.fail_expired_calls(now_us);
        info!(target: "duct", session = %self.session_id, resumed, replayed, %encoding, "session established");
        self.events.push(DuctEvent::Established { resumed, replayed });
    }

    fn on_envelope(&mut self, env: Envelope, now_us: u64, tx: &mut dyn Transport) {
        match env {
            Envelope::Publish { topic, msg, .. } => match self.remote.get(&topic) {
                Some(r) if r.spec.enabled => {
                    if let Err(e) = r.publisher.publish(msg) {
                        warn!(target: "duct", %topic, "local publish failed: {e}");
                    }
                }
                Some(_) => {}
                None => debug!(target: "duct", %topic, "publish for unrelayed topic"),
            },
            Envelope::CallService { service, args, id } => {
                if !self.cfg.local_services.contains(&service) {
                    self.send(tx, &Envelope::ServiceResponse {
                        id,
                        values: Value::Text(format!("service {service} is not exposed")),
                        result: false,
                    });
                    return;
                }
                match self.bus.begin_call(&service, args) {
                    Ok(call) => match call.try_take() {
                        Some(r) => self.send(tx, &response(id, r)),
                        None => {
                            let deadline_us = now_us + self.cfg.service_timeout_ms * 1000;
                            self.incoming.insert(id, IncomingCall { call, deadline_us });
                        }
                    },
                    Err(e) => self.send(tx, &response(id, Err(e))),
                }
            }
            Envelope::ServiceResponse { id, values, result } => {
                if let Some(c) = self.outgoing.remove(&id) {
                    if result {
                        c.responder.respond(Ok(values));
                    } else {
                        c.responder.respond(Err(error_text(&values)));
                    }
                }
            }
            Envelope::Ping { nonce } => self.send(tx, &Envelope::Pong { nonce }),
            Envelope::Pong { nonce } => {
                self.unanswered_pings = 0;
                self.unconfirmed.retain(|_, queued_at| *queued_at >= nonce);
            }
            Envelope::Status { level, msg, ref_id } => match level {
                StatusLevel::Error | StatusLevel::Warning => {
                    warn!(target: "duct", level = level.as_str(), ?ref_id, "bridge: {msg}")
                }
                StatusLevel::Info => debug!(target: "duct", ?ref_id, "bridge: {msg}"),
            },
            other => debug!(target: "duct", op = %other.op(), "ignoring envelope"),
        }
    }

    fn send(&self, tx: &mut dyn Transport, env: &Envelope) {
        match self.codec.encode_frame(env, self.encoding) {
            Ok(frame) => {
                let _ = tx.send(frame);
            }
            Err(e) => warn!(target: "duct", op = %env.op(), "cannot encode: {e}"),
        }
    }

    fn fail_expired_calls(&mut self, now_us: u64) {
        let expired: Vec<String> = self
            .outgoing
            .iter()
            .filter(|(_, c)| now_us >= c.deadline_us)
            .map(|(id, _)| id.clone())
            .collect();
        for id in expired {
            if let Some(c) = self.outgoing.remove(&id) {
                c.responder.fail(CallError::Timeout);
            }
        }
    }

    /// Runs timers and moves local traffic onto the link. `tx` is the live
    /// connection, if there is one.
    pub fn poll(&mut self, now_us: u64, tx: Option<&mut dyn Transport>) -> Option<DuctRequest> {
        self.fail_expired_calls(now_us);
        let proxied: Vec<ProxyCall> = std::mem::take(&mut *self.proxy_queue.lock());
        let encoding = self.encoding;

        match (self.phase, tx) {
            (Phase::Idle, _) => {
                self.drain_offline(proxied);
                if now_us >= self.retry_at_us {
                    self.phase = Phase::Connecting;
                    self.phase_since_us = now_us;
                    return Some(DuctRequest::Connect);
                }
                None
            }
            (Phase::AwaitingAck, _) => {
                self.drain_offline(proxied);
                let limit = self.cfg.keepalive.interval_ms * self.cfg.keepalive.max_missed as u64 * 1000;
                if now_us >= self.phase_since_us + limit {
                    return Some(DuctRequest::Close);
                }
                None
            }
            (Phase::Live, Some(tx)) => {
                while let Some(env) = self.control.pop_front() {
                    self.send(tx, &env);
                }
                for p in proxied {
                    self.next_call += 1;
                    let id = format!("duct-{}", self.next_call);
                    self.send(tx, &Envelope::CallService {
                        service: p.service,
                        args: p.args,
                        id: id.clone(),
                    });
                    self.outgoing.insert(
                        id,
                        OutgoingCall {
                            responder: p.responder,
                            deadline_us: now_us + self.cfg.service_timeout_ms * 1000,
                        },
                    );
                }
                let mut finished = Vec::new();
                for (id, c) in &self.incoming {
                    if let Some(r) = c.call.try_take() {
                        finished.push((id.clone(), r));
                    } else if now_us >= c.deadline_us {
                        finished.push((id.clone(), Err(CallError::Timeout)));
                    }
                }
                for (id, r) in finished {
                    self.incoming.remove(&id);
                    self.send(tx, &response(id, r));
                }

                if now_us >= self.next_ping_us {
                    if self.unanswered_pings >= self.cfg.keepalive.max_missed {
                        return Some(DuctRequest::Close);
                    }
                    self.ping_nonce += 1;
                    self.unanswered_pings += 1;
                    self.send(tx, &Envelope::Ping {
                        nonce: self.ping_nonce,
                    });
                    self.next_ping_us = now_us + self.cfg.keepalive.interval_ms * 1000;
                }

                let high_water = self.cfg.high_water_bytes;
                let codec = self.codec;
                let mark = self.mark;
                for (topic, relay) in self.local.iter_mut() {
                    absorb_bus_drops(relay);
                    let fresh: Vec<BusMessage> = relay
                        .sub
                        .drain()
                        .into_iter()
                        .filter(|m| m.provenance != Some(mark))
                        .collect();
                    absorb_bus_drops(relay);
                    if !relay.spec.enabled {
                        for m in fresh {
                            count_suppressed(relay, &codec, encoding, m);
                        }
                        continue;
                    }
                    let spec = relay.spec.throttle_spec();
                    let emit = |m: BusMessage, tx: &mut dyn Transport| {
                        let env = Envelope::Publish {
                            topic: topic.clone(),
                            msg: m.payload,
                            seq: m.seq,
                        };
                        match codec.encode_frame(&env, encoding) {
                            Ok(frame) => {
                                let _ = tx.send(frame);
                            }
                            Err(e) => warn!(target: "duct", %topic, "dropping unencodable message: {e}"),
                        }
                    };
                    while tx.backlog() <= high_water {
                        let Some(m) = relay.throttle.tick_limited(&spec, now_us, 1).pop() else {
                            break;
                        };
                        emit(m, tx);
                    }
                    for m in fresh {
                        let adm = if tx.backlog() <= high_water {
                            relay.throttle.admit(&spec, m, now_us)
                        } else {
                            relay.throttle.enqueue(&spec, m)
                        };
                        if let Admission::Emit(m) = adm {
                            emit(m, tx);
                        }
                    }
                }
                None
            }
            (Phase::Live, None) => {
                self.on_disconnected(now_us, "transport missing");
                None
            }
            (Phase::Connecting | Phase::GaveUp, _) => {
                self.drain_offline(proxied);
                None
            }
        }
    }

    /// Local traffic while no session is live is stale by the time one is;
    /// it is dropped (counted) rather than buffered.
    fn drain_offline(&mut self, proxied: Vec<ProxyCall>) {
        for p in proxied {
            p.responder.respond(Err("bridge not connected".into()));
        }
        let encoding = self.encoding;
        let codec = self.codec;
        for relay in self.local.values_mut() {
            absorb_bus_drops(relay);
            let fresh = relay.sub.drain();
            absorb_bus_drops(relay);
            for m in fresh {
                if m.provenance == Some(self.mark) {
                    continue;
                }
                if relay.spec.enabled {
                    relay.throttle.discard();
                } else {
                    count_suppressed(relay, &codec, encoding, m);
                }
            }
        }
    }

    /// Earliest time at which [`poll`](Self::poll) has timer work to do.
    pub fn next_wakeup(&self) -> Option<u64> {
        let mut next: Option<u64> = None;
        let mut consider = |t: u64| next = Some(next.map_or(t, |n: u64| n.min(t)));
        match self.phase {
            Phase::Idle => consider(self.retry_at_us),
            Phase::AwaitingAck => consider(
                self.phase_since_us
                    + self.cfg.keepalive.interval_ms * self.cfg.keepalive.max_missed as u64 * 1000,
            ),
            Phase::Live => {
                consider(self.next_ping_us);
                if !self.control.is_empty() {
                    consider(0);
                }
                for r in self.local.values().filter(|r| r.spec.enabled) {
                    if let Some(t) = r.throttle.next_ready_us(&r.spec.throttle_spec()) {
                        consider(t);
                    }
                }
                for c in self.incoming.values() {
                    consider(c.deadline_us);
                }
            }
            Phase::Connecting | Phase::GaveUp => {}
        }
        for c in self.outgoing.values() {
            consider(c.deadline_us);
        }
        if !self.proxy_queue.lock().is_empty() {
            consider(0);
        }
        next
    }
}

fn absorb_bus_drops(relay: &mut LocalRelay) {
    let drops = relay.sub.dropped();
    for _ in relay.seen_bus_drops..drops {
        relay.throttle.discard();
    }
    relay.seen_bus_drops = drops;
}

fn count_suppressed(relay: &mut LocalRelay, codec: &Codec, encoding: Encoding, m: BusMessage) {
    let env = Envelope::Publish {
        topic: relay.spec.topic.clone(),
        msg: m.payload,
        seq: m.seq,
    };
    relay.suppressed += 1;
    if let Ok(bytes) = codec.encode(&env, encoding) {
        relay.suppressed_bytes += bytes.len() as u64;
    }
}

fn response(id: String, result: Result<Value, CallError>) -> Envelope {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::transport::RecordingTransport;

    const SEC: u64 = 1_000_000;

    fn policy(jitter: f64) -> ReconnectPolicy {
        ReconnectPolicy {
            initial_backoff_ms: 500,
            multiplier: 2.0,
            max_backoff_ms: 30_000,
            jitter_fraction: jitter,
            give_up_after_ms: None,
        }
    }

    #[test]
    fn backoff_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = policy(0.0);
        assert_eq!(p.next_backoff(0, &mut rng), Duration::from_millis(500));
        assert_eq!(p.next_backoff(3, &mut rng), Duration::from_secs(4));
        assert_eq!(p.next_backoff(10, &mut rng), Duration::from_secs(30));
        let mut prev = Duration::ZERO;
        for a in 0..40 {
            let d = p.next_backoff(a, &mut rng);
            assert!(d >= prev);
            prev = d;
        }
    }

    #[test]
    fn jitter_stays_in_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = policy(0.25);
        for a in 0..12 {
            let base = p.base_delay_ms(a) / 1000.0;
            let d = p.next_backoff(a, &mut rng).as_secs_f64();
            assert!(d >= base * 0.75 - 1e-9 && d <= base * 1.25 + 1e-9, "{a}: {d}");
            assert!(d <= p.max_delay(a).as_secs_f64() + 1e-9);
        }
    }

    fn config() -> DuctConfig {
        let mut cfg = DuctConfig::new("ws://cloud:9090/duct");
        cfg.local_topics = vec![RelaySpec::new("/scan", "sensor/LaserScan"), RelaySpec::new("/odom", "nav/Odometry")];
        cfg.remote_topics = vec![RelaySpec::new("/cmd_vel", "geometry/Twist")];
        cfg.local_services = vec!["/arm/grip".into()];
        cfg.remote_services = vec!["/map/lookup".into()];
        cfg.reconnect.jitter_fraction = 0.0;
        cfg
    }

    #[test]
    fn config_validation() {
        let mut cfg = config();
        cfg.remote_topics.push(RelaySpec::new("/scan", "x"));
        assert!(matches!(cfg.validate(), Err(DuctError::ConfigInvalid(_))));

        let mut cfg = config();
        cfg.bridge_url = "http://cloud".into();
        assert!(cfg.validate().is_err());

        let mut cfg = config();
        cfg.local_topics[0].queue_length = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = config();
        cfg.local_topics[0].topic = "scan".into();
        assert!(cfg.validate().is_err());

        let mut cfg = config();
        cfg.reconnect.max_backoff_ms = 10;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_and_json_agree() {
        let toml_text = r#"
            bridge_url = "ws://cloud:9090/duct"
            session_id = "robot-7"
            encodings = ["json"]
            local_topics = [{ topic = "/scan", type = "sensor/LaserScan", throttle_rate = 100, queue_length = 2 }]
            [reconnect]
            initial_backoff_ms = 250
        "#;
        let json_text = r#"{
            "bridge_url": "ws://cloud:9090/duct",
            "session_id": "robot-7",
            "encodings": ["json"],
            "local_topics": [{"topic": "/scan", "type": "sensor/LaserScan", "throttle_rate": 100, "queue_length": 2}],
            "reconnect": {"initial_backoff_ms": 250}
        }"#;
        let a = DuctConfig::parse(toml_text).unwrap();
        assert_eq!(a, DuctConfig::parse(json_text).unwrap());
        assert_eq!(a.reconnect.max_backoff_ms, 30_000);
        assert!(a.local_topics[0].enabled);
        assert!(matches!(DuctConfig::parse("bridge_url = 3"), Err(DuctError::ConfigInvalid(_))));
        assert!(DuctConfig::parse("bridge_url = \"ws://x\"\nsurprise = 1").is_err());
    }

    struct Rig {
        duct: Duct,
        bus: LocalBus,
        clock: Arc<ManualClock>,
        tx: RecordingTransport,
        _grip: ServiceHandle,
    }

    impl Rig {
        fn new(cfg: DuctConfig) -> Self {
            let clock = Arc::new(ManualClock::new(0));
            let bus = LocalBus::new(clock.clone());
            let grip = bus.register_fn("/arm/grip", "arm/Grip", Ok).unwrap();
            Rig {
                duct: Duct::new(cfg, bus.clone(), 42).unwrap(),
                bus,
                clock,
                tx: RecordingTransport::new(),
                _grip: grip,
            }
        }

        fn at(&mut self, t: u64) -> u64 {
            self.clock.set(t);
            t
        }

        fn sent(&mut self) -> Vec<Envelope> {
            self.tx
                .take()
                .iter()
                .map(|f| Codec::default().decode_frame(f).unwrap())
                .collect()
        }

        fn poll(&mut self, t: u64) -> Option<DuctRequest> {
            let t = self.at(t);
            if self.duct.is_live() {
                self.duct.poll(t, Some(&mut self.tx))
            } else {
                self.duct.poll(t, None)
            }
        }

        fn feed(&mut self, env: Envelope, t: u64) -> Option<DuctRequest> {
            let frame = Codec::default().encode_frame(&env, Encoding::Cbor).unwrap();
            self.duct.on_frame(&frame, t, &mut self.tx)
        }

        /// Connects and completes the handshake; returns what was sent
        /// during it (hello excluded).
        fn establish(&mut self, t: u64, resumed: bool) -> Vec<Envelope> {
            assert_eq!(self.poll(t), Some(DuctRequest::Connect));
            self.duct.on_connected(t, &mut self.tx);
            let hello = self.sent();
            assert!(matches!(hello[..], [Envelope::Hello { .. }]));
            let sid = self.duct.session_id().to_owned();
            self.feed(
                Envelope::HelloAck {
                    session_id: sid,
                    resumed,
                    encoding: Encoding::Cbor,
                },
                t,
            );
            assert!(self.duct.is_live());
            self.poll(t);
            self.sent()
        }

        /// One keepalive round trip, which confirms everything sent so far.
        fn round_trip(&mut self, t: u64) {
            self.poll(t);
            let nonce = match self.sent().last() {
                Some(Envelope::Ping { nonce }) => *nonce,
                other => panic!("expected a ping, got {other:?}"),
            };
            self.feed(Envelope::Pong { nonce }, t);
        }
    }

    #[test]
    fn session_id_generation() {
        let a = Rig::new(config());
        let b = Rig::new(config());
        assert_eq!(a.duct.session_id().len(), 32);
        assert!(a.duct.session_id().chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(a.duct.session_id(), b.duct.session_id());
        let mut cfg = config();
        cfg.session_id = Some("robot-7".into());
        assert_eq!(Rig::new(cfg).duct.session_id(), "robot-7");
    }

    #[test]
    fn fresh_session_replays_everything() {
        let mut r = Rig::new(config());
        let out = r.establish(0, false);
        let ops: Vec<Op> = out.iter().map(Envelope::op).collect();
        assert_eq!(ops.iter().filter(|&&o| o == Op::Advertise).count(), 2);
        assert_eq!(ops.iter().filter(|&&o| o == Op::Subscribe).count(), 1);
        assert_eq!(ops.iter().filter(|&&o| o == Op::AdvertiseService).count(), 1);
        assert_eq!(out.len(), 4);
        assert_eq!(r.duct.peer_view(), &r.duct.desired_view());
        assert!(out.contains(&Envelope::AdvertiseService {
            service: "/arm/grip".into(),
            type_name: "arm/Grip".into()
        }));
    }

    #[test]
    fn resume_replays_nothing() {
        let mut r = Rig::new(config());
        r.establish(0, false);
        r.round_trip(5 * SEC);
        r.duct.on_disconnected(6 * SEC, "test");
        assert_eq!(r.poll(6 * SEC), None);
        // first retry after initial_backoff
        let out = r.establish(6 * SEC + 500_000, true);
        assert!(out.is_empty(), "{out:?}");
    }

    #[test]
    fn unconfirmed_changes_repeat_on_resume() {
        let mut r = Rig::new(config());
        r.establish(0, false);
        r.round_trip(5 * SEC);

        // sent, but the link broke before any pong vouched for it
        r.duct.set_relay_enabled("/scan", false).unwrap();
        r.poll(6 * SEC);
        assert_eq!(r.sent(), vec![Envelope::Unadvertise { topic: "/scan".into() }]);
        r.duct.on_disconnected(6 * SEC + 1, "test");
        let out = r.establish(7 * SEC, true);
        assert_eq!(out, vec![Envelope::Unadvertise { topic: "/scan".into() }]);

        // queued but never sent
        r.round_trip(12 * SEC);
        r.duct.set_relay_enabled("/scan", true).unwrap();
        r.duct.on_disconnected(12 * SEC + 1, "test");
        let out = r.establish(13 * SEC, true);
        assert_eq!(out.len(), 1);
        assert!(matches!(&out[0], Envelope::Advertise { topic, .. } if topic == "/scan"));

        // confirmed this time, so nothing to repeat
        r.round_trip(18 * SEC);
        r.duct.on_disconnected(18 * SEC + 1, "test");
        assert!(r.establish(19 * SEC, true).is_empty());
    }

    #[test]
    fn hello_after_first_session_asks_to_resume() {
        let mut r = Rig::new(config());
        r.establish(0, false);
        r.duct.on_disconnected(SEC, "test");
        r.poll(2 * SEC);
        r.duct.on_connected(2 * SEC, &mut r.tx);
        assert!(matches!(r.sent()[0], Envelope::Hello { resume: true, .. }));
    }

    #[test]
    fn disabling_relays() {
        let mut r = Rig::new(config());
        r.establish(0, false);
        assert_eq!(r.duct.set_relay_enabled("/cmd_vel", false), Ok(true));
        r.poll(1);
        assert_eq!(r.sent(), vec![Envelope::Unsubscribe { topic: "/cmd_vel".into() }]);
        assert_eq!(r.duct.set_relay_enabled("/cmd_vel", false), Ok(false));
        r.poll(2);
        assert!(r.sent().is_empty());
        assert_eq!(
            r.duct.set_relay_enabled("/nope", true),
            Err(DuctError::UnknownRelay("/nope".into()))
        );
    }

    #[test]
    fn toggles_while_offline_apply_on_reconnect() {
        let mut r = Rig::new(config());
        r.establish(0, false);
        r.round_trip(5 * SEC);
        r.duct.on_disconnected(6 * SEC, "test");
        r.duct.set_relay_enabled("/scan", false).unwrap();
        r.duct.set_relay_enabled("/cmd_vel", false).unwrap();
        r.duct.set_relay_enabled("/cmd_vel", true).unwrap();
        let out = r.establish(7 * SEC, true);
        assert_eq!(out, vec![Envelope::Unadvertise { topic: "/scan".into() }]);

        r.duct.on_disconnected(8 * SEC, "test");
        let out = r.establish(9 * SEC, false);
        assert_eq!(out.len(), 3);
        assert!(!out.contains(&Envelope::Advertise {
            topic: "/scan".into(),
            type_name: "sensor/LaserScan".into()
        }));
    }

    #[test]
    fn keepalive_declares_link_dead() {
        let mut r = Rig::new(config());
        r.establish(0, false);
        for k in 1..=3 {
            assert_eq!(r.poll(k * 5 * SEC), None);
            assert!(matches!(r.sent()[..], [Envelope::Ping { .. }]));
        }
        assert_eq!(r.poll(20 * SEC), Some(DuctRequest::Close));
    }

    #[test]
    fn pong_resets_keepalive() {
        let mut r = Rig::new(config());
        r.establish(0, false);
        for k in 1..=10 {
            assert_eq!(r.poll(k * 5 * SEC), None);
            r.feed(Envelope::Pong { nonce: k as i64 }, k * 5 * SEC);
        }
        assert!(r.duct.is_live());
    }

    #[test]
    fn local_traffic_relayed_with_throttle() {
        let mut cfg = config();
        cfg.local_topics[0] = RelaySpec::new("/scan", "sensor/LaserScan").throttled(100, 1);
        let mut r = Rig::new(cfg);
        r.establish(0, false);
        let p = r.bus.advertise("/scan", "sensor/LaserScan").unwrap();
        for i in 0..5 {
            r.at(i * 10_000);
            p.publish(Value::Int(i as i64)).unwrap();
            r.poll(i * 10_000);
        }
        r.poll(100_000);
        let msgs: Vec<Value> = r
            .sent()
            .into_iter()
            .filter_map(|e| match e {
                Envelope::Publish { msg, .. } => Some(msg),
                _ => None,
            })
            .collect();
        assert_eq!(msgs, vec![Value::Int(0), Value::Int(4)]);
        let st = r.duct.relay_stats("/scan").unwrap();
        assert_eq!((st.throttle.admitted, st.throttle.emitted, st.throttle.dropped), (5, 2, 3));
    }

    #[test]
    fn relayed_messages_not_sent_back() {
        let mut r = Rig::new(config());
        r.establish(0, false);
        let echo = r.bus.advertise_relayed("/odom", "nav/Odometry", r.duct.mark()).unwrap();
        echo.publish(Value::Int(1)).unwrap();
        r.poll(1);
        assert!(r.sent().is_empty());
    }

    #[test]
    fn remote_publish_lands_on_local_bus() {
        let mut r = Rig::new(config());
        r.establish(0, false);
        let sub = r.bus.subscribe("/cmd_vel", 4).unwrap();
        r.feed(
            Envelope::Publish {
                topic: "/cmd_vel".into(),
                msg: Value::Float(0.5),
                seq: 1,
            },
            1,
        );
        let got = sub.drain();
        assert_eq!(got[0].payload, Value::Float(0.5));
        assert_eq!(got[0].provenance, Some(r.duct.mark()));
    }

    #[test]
    fn suppressed_bytes_match_frames() {
        let mut r = Rig::new(config());
        r.establish(0, false);
        r.duct.set_relay_enabled("/odom", false).unwrap();
        r.poll(1);
        r.sent();
        let p = r.bus.advertise("/odom", "nav/Odometry").unwrap();
        p.publish(Value::Bytes(vec![9; 300])).unwrap();
        r.poll(2);
        assert!(r.sent().is_empty());
        let expected = Codec::default()
            .encode(
                &Envelope::Publish {
                    topic: "/odom".into(),
                    msg: Value::Bytes(vec![9; 300]),
                    seq: 1,
                },
                Encoding::Cbor,
            )
            .unwrap()
            .len() as u64;
        let st = r.duct.relay_stats("/odom").unwrap();
        assert_eq!((st.suppressed, st.suppressed_bytes), (1, expected));
    }

    #[test]
    fn congestion_holds_messages_back() {
        let mut r = Rig::new(config());
        r.establish(0, false);
        let p = r.bus.advertise("/odom", "nav/Odometry").unwrap();
        r.tx.backlog = usize::MAX;
        for i in 0..3 {
            p.publish(Value::Int(i)).unwrap();
        }
        r.poll(1);
        assert!(r.sent().is_empty());
        r.tx.backlog = 0;
        r.poll(2);
        assert_eq!(r.sent().len(), 3);
        let st = r.duct.relay_stats("/odom").unwrap();
        assert_eq!(st.throttle.emitted, 3);
    }

    #[test]
    fn remote_service_call_roundtrip() {
        let mut r = Rig::new(config());
        r.establish(0, false);
        let pending = r.bus.begin_call("/map/lookup", Value::Text("kitchen".into())).unwrap();
        r.poll(1);
        let id = match &r.sent()[..] {
            [Envelope::CallService { service, id, .. }] if service == "/map/lookup" => id.clone(),
            other => panic!("{other:?}"),
        };
        r.feed(
            Envelope::ServiceResponse {
                id,
                values: Value::Int(3),
                result: true,
            },
            2,
        );
        assert_eq!(pending.try_take(), Some(Ok(Value::Int(3))));
    }

    #[test]
    fn remote_call_times_out_across_disconnect() {
        let mut cfg = config();
        cfg.service_timeout_ms = 1_000;
        let mut r = Rig::new(cfg);
        r.establish(0, false);
        let pending = r.bus.begin_call("/map/lookup", Value::Null).unwrap();
        r.poll(1);
        assert_eq!(r.sent().len(), 1);
        r.duct.on_disconnected(10, "test");
        assert_eq!(pending.try_take(), None);
        r.establish(2 * SEC, true);
        assert_eq!(pending.try_take(), Some(Err(CallError::Timeout)));
    }

    #[test]
    fn remote_call_while_offline_fails_fast() {
        let mut r = Rig::new(config());
        let pending = r.bus.begin_call("/map/lookup", Value::Null).unwrap();
        r.poll(0);
        assert!(matches!(pending.try_take(), Some(Err(CallError::HandlerFailure(_)))));
    }

    #[test]
    fn bridge_calls_local_service() {
        let mut r = Rig::new(config());
        r.establish(0, false);
        r.feed(
            Envelope::CallService {
                service: "/arm/grip".into(),
                args: Value::Int(5),
                id: "b1".into(),
            },
            1,
        );
        r.poll(2);
        assert_eq!(
            r.sent(),
            vec![Envelope::ServiceResponse {
                id: "b1".into(),
                values: Value::Int(5),
                result: true
            }]
        );
        r.feed(
            Envelope::CallService {
                service: "/secret".into(),
                args: Value::Null,
                id: "b2".into(),
            },
            3,
        );
        assert!(matches!(&r.sent()[..], [Envelope::ServiceResponse { result: false, .. }]));
    }

    #[test]
    fn reconnect_backs_off_then_gives_up() {
        let mut cfg = config();
        cfg.reconnect.give_up_after_ms = Some(3_000);
        let mut r = Rig::new(cfg);
        assert_eq!(r.poll(0), Some(DuctRequest::Connect));
        r.duct.on_connect_failed(0);
        assert_eq!(r.poll(499_999), None);
        assert_eq!(r.poll(500_000), Some(DuctRequest::Connect));
        r.duct.on_connect_failed(500_000);
        assert_eq!(r.duct.next_wakeup(), Some(1_500_000));
        r.poll(1_500_000);
        r.duct.on_connect_failed(1_500_000);
        assert_eq!(r.duct.phase(), Phase::Idle);
        r.poll(3_500_000);
        r.duct.on_connect_failed(3_500_000);
        assert_eq!(r.duct.phase(), Phase::GaveUp);
        assert!(r.duct.take_events().contains(&DuctEvent::GaveUp));
    }

    #[test]
    fn refused_handshake_closes() {
        let mut r = Rig::new(config());
        r.poll(0);
        r.duct.on_connected(0, &mut r.tx);
        let req = r.feed(Envelope::status(StatusLevel::Error, "too many sessions", None), 1);
        assert_eq!(req, Some(DuctRequest::Close));
    }
}
