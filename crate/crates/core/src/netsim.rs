//! Deterministic discrete-event simulation of a duct and a bridge joined by
//! a lossy, slow, intermittently broken link.
//!
//! Time is integer microseconds. Events at the same instant run in the
//! order they were scheduled. Every random draw comes from one seeded
//! ChaCha stream per simulation, so a scenario always yields the same
//! trace.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{load_rules, ActivationController, ActivationReport, STATE_TOPIC};
use crate::bridge::{Bridge, BridgeConfig, ConnControl, ConnId, ConnectionSet};
use crate::bus::{LocalBus, Publisher, Subscription};
use crate::clock::ManualClock;
use crate::duct::{Duct, DuctConfig, DuctEvent, DuctRequest, PeerItem, Phase, RelayStats};
use crate::flow::ThrottleCounters;
use crate::transport::{Transport, TransportError};
use crate::value::Value;
use crate::wire::{Codec, Frame};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetsimError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
}

fn invalid(msg: impl Into<String>) -> NetsimError {
    NetsimError::ScenarioInvalid(msg.into())
}

fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0).round().max(0.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisconnectWindow {
    pub start_ms: f64,
    pub duration_ms: f64,
}

impl DisconnectWindow {
    pub fn start_us(&self) -> u64 {
        ms_to_us(self.start_ms)
    }

    pub fn end_us(&self) -> u64 {
        ms_to_us(self.start_ms + self.duration_ms)
    }

    pub fn contains_us(&self, t: u64) -> bool {
        t >= self.start_us() && t < self.end_us()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub latency_ms: f64,
    pub jitter_ms: f64,
    /// Per-frame probability that the connection breaks instead.
    pub loss_prob: f64,
    /// Per direction; `None` is unlimited.
    pub bandwidth_bytes_per_s: Option<f64>,
    pub disconnects: Vec<DisconnectWindow>,
    pub seed: u64,
}

impl Default for LinkProfile {
    fn default() -> Self {
        LinkProfile::perfect(0)
    }
}

impl LinkProfile {
    /// Zero latency, no loss, no cap, never down.
    pub fn perfect(seed: u64) -> Self {
        LinkProfile {
            latency_ms: 0.0,
            jitter_ms: 0.0,
            loss_prob: 0.0,
            bandwidth_bytes_per_s: None,
            disconnects: Vec::new(),
            seed,
        }
    }

    /// Windows of `duration_ms` starting every `every_ms` (first one at
    /// `every_ms`) and before `until_ms`.
    pub fn periodic_disconnects(every_ms: f64, duration_ms: f64, until_ms: f64) -> Vec<DisconnectWindow> {
        let mut out = Vec::new();
        let mut k = 1.0;
        while every_ms > 0.0 && k * every_ms < until_ms {
            out.push(DisconnectWindow {
                start_ms: k * every_ms,
                duration_ms,
            });
            k += 1.0;
        }
        out
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.latency_ms) || !finite_nonneg(self.jitter_ms) {
            return Err(invalid("latency_ms and jitter_ms must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(invalid("loss_prob must be in [0, 1]"));
        }
        if let Some(bw) = self.bandwidth_bytes_per_s {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(invalid("bandwidth_bytes_per_s must be > 0"));
            }
        }
        let mut prev_end = f64::NEG_INFINITY;
        for w in &self.disconnects {
            if !(finite_nonneg(w.start_ms) && w.duration_ms.is_finite() && w.duration_ms > 0.0) {
                return Err(invalid("disconnect windows need start >= 0 and duration > 0"));
            }
            if w.start_ms < prev_end {
                return Err(invalid("disconnect windows must be sorted and must not overlap"));
            }
            prev_end = w.start_ms + w.duration_ms;
        }
        Ok(())
    }

    pub fn down_at(&self, t_us: u64) -> bool {
        self.disconnects.iter().any(|w| w.contains_us(t_us))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Duct to bridge.
    Up,
    /// Bridge to duct.
    Down,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Up => "up",
            Direction::Down => "down",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transmission {
    Deliver { at_us: u64 },
    Teardown,
}

#[derive(Debug, Default, Clone)]
struct Pipe {
    /// When the sender finishes serializing everything accepted so far.
    busy_until_us: u64,
    last_delivery_us: u64,
    /// (serialization end, size) of frames still leaving the sender.
    leaving: VecDeque<(u64, usize)>,
}

/// Both directions of one simulated link. Each direction is a FIFO: frames
/// are serialized back to back at the bandwidth cap, then spend
/// `latency ± jitter` in flight, and never overtake each other.
#[derive(Debug, Clone)]
pub struct Link {
    profile: LinkProfile,
    rng: ChaCha8Rng,
    pipes: [Pipe; 2],
}

impl Link {
    pub fn new(profile: LinkProfile) -> Self {
        Link {
            rng: ChaCha8Rng::seed_from_u64(profile.seed),
            profile,
            pipes: Default::default(),
        }
    }

    pub fn profile(&self) -> &LinkProfile {
        &self.profile
    }

    fn pipe(&mut self, dir: Direction) -> &mut Pipe {
        &mut self.pipes[dir as usize]
    }

    /// A new connection starts with empty pipes.
    pub fn reset(&mut self) {
        self.pipes = Default::default();
    }

    pub fn transmit(&mut self, dir: Direction, len: usize, now_us: u64) -> Transmission {
        if self.profile.down_at(now_us) {
            return Transmission::Teardown;
        }
        if self.profile.loss_prob > 0.0 && self.rng.gen::<f64>() < self.profile.loss_prob {
            return Transmission::Teardown;
        }
        let latency = self.profile.latency_ms * 1000.0;
        let jitter = if self.profile.jitter_ms > 0.0 {
            let j = self.profile.jitter_ms * 1000.0;
            self.rng.gen_range(-j..=j)
        } else {
            0.0
        };
        let serialize_us = match self.profile.bandwidth_bytes_per_s {
            Some(bw) => (len as f64 / bw * 1e6).round() as u64,
            None => 0,
        };
        let pipe = self.pipe(dir);
        let start = pipe.busy_until_us.max(now_us);
        let done = start + serialize_us;
        pipe.busy_until_us = done;
        if serialize_us > 0 {
            pipe.leaving.push_back((done, len));
        }
        let flight = (latency + jitter).round().max(0.0) as u64;
        let at_us = (done + flight).max(pipe.last_delivery_us);
        pipe.last_delivery_us = at_us;
        Transmission::Deliver { at_us }
    }

    /// Octets accepted in `dir` that have not been fully serialized.
    pub fn backlog(&mut self, dir: Direction, now_us: u64) -> usize {
        let pipe = self.pipe(dir);
        while pipe.leaving.front().is_some_and(|&(done, _)| done <= now_us) {
            pipe.leaving.pop_front();
        }
        pipe.leaving.iter().map(|&(_, len)| len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time_us: u64,
    pub event: &'static str,
    pub detail: String,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:03}\t{}\t{}",
            self.time_us / 1000,
            self.time_us % 1000,
            self.event,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameFate {
    Sent,
    Delivered,
    /// In flight when its connection died.
    Lost,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub time_us: u64,
    pub dir: Direction,
    pub fate: FrameFate,
    pub op: String,
    pub subject: String,
    pub len: usize,
}

/// A message seen on one of the two buses.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageRecord {
    pub time_us: u64,
    pub topic: String,
    /// Workload sequence number carried in the payload.
    pub n: i64,
    /// `Null` when the scenario does not record payloads.
    pub payload: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    /// `payload_bytes` pseudo-random octets.
    #[default]
    Bytes,
    /// A list of `payload_bytes / 8` floats.
    Floats,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadItem {
    pub topic: String,
    pub rate_hz: f64,
    pub payload_bytes: usize,
    #[serde(default)]
    pub payload: PayloadKind,
    #[serde(default)]
    pub start_ms: f64,
    pub stop_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateChange {
    pub at_ms: f64,
    pub state: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expectations {
    pub resumes_at_least: Option<u64>,
    /// Every published message arrives.
    pub lossless: bool,
    /// At the end the bridge holds exactly the duct's enabled relays.
    pub replay_complete: bool,
    pub live_at_end: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LinkSection {
    latency_ms: f64,
    jitter_ms: f64,
    loss_prob: f64,
    bandwidth_bytes_per_s: Option<f64>,
    disconnects: Vec<(f64, f64)>,
    disconnect_every_ms: Option<f64>,
    disconnect_duration_ms: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        LinkSection {
            latency_ms: 0.0,
            jitter_ms: 0.0,
            loss_prob: 0.0,
            bandwidth_bytes_per_s: None,
            disconnects: Vec::new(),
            disconnect_every_ms: None,
            disconnect_duration_ms: 500.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    #[serde(default = "default_seed")]
    seed: u64,
    duration_ms: f64,
    #[serde(default)]
    record_payloads: Option<bool>,
    #[serde(default)]
    link: LinkSection,
    #[serde(default)]
    duct: toml::Table,
    #[serde(default)]
    bridge: BridgeConfig,
    #[serde(default)]
    workload: Vec<WorkloadItem>,
    activation: Option<toml::Table>,
    #[serde(default)]
    states: Vec<StateChange>,
    #[serde(default)]
    expect: Expectations,
}

fn default_seed() -> u64 {
    1
}

pub const SIM_BRIDGE_URL: &str = "ws://netsim/duct";

/// Everything needed to run one simulation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration_ms: f64,
    pub record_payloads: bool,
    pub link: LinkProfile,
    pub duct: DuctConfig,
    pub bridge: BridgeConfig,
    pub workload: Vec<WorkloadItem>,
    /// Activation rules document, if the scenario switches relays.
    pub activation: Option<String>,
    pub states: Vec<StateChange>,
    pub expect: Expectations,
}

const PERFECT_LINK: &str = include_str!("../scenarios/perfect-link.toml");
const FLAKY_LINK: &str = include_str!("../scenarios/flaky-link.toml");
const PICK_CYCLE: &str = include_str!("../scenarios/pick-cycle.toml");

/// Scenarios shipped with the crate, by name.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "perfect-link" => Some(PERFECT_LINK),
        "flaky-link" => Some(FLAKY_LINK),
        "pick-cycle" => Some(PICK_CYCLE),
        _ => None,
    }
}

impl Scenario {
    /// A scenario with no workload over `link`.
    pub fn new(name: &str, duration_ms: f64, link: LinkProfile, duct: DuctConfig) -> Self {
        Scenario {
            name: name.to_owned(),
            seed: link.seed,
            duration_ms,
            record_payloads: true,
            link,
            duct,
            bridge: BridgeConfig::default(),
            workload: Vec::new(),
            activation: None,
            states: Vec::new(),
            expect: Expectations::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, NetsimError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        let mut disconnects: Vec<DisconnectWindow> = file
            .link
            .disconnects
            .iter()
            .map(|&(start_ms, duration_ms)| DisconnectWindow { start_ms, duration_ms })
            .collect();
        if let Some(every) = file.link.disconnect_every_ms {
            if !disconnects.is_empty() {
                return Err(invalid("give either disconnects or disconnect_every_ms, not both"));
            }
            disconnects =
                LinkProfile::periodic_disconnects(every, file.link.disconnect_duration_ms, file.duration_ms);
        }
        let link = LinkProfile {
            latency_ms: file.link.latency_ms,
            jitter_ms: file.link.jitter_ms,
            loss_prob: file.link.loss_prob,
            bandwidth_bytes_per_s: file.link.bandwidth_bytes_per_s,
            disconnects,
            seed: file.seed,
        };
        let mut duct_table = file.duct;
        duct_table
            .entry("bridge_url")
            .or_insert_with(|| toml::Value::String(SIM_BRIDGE_URL.into()));
        let duct: DuctConfig = duct_table
            .try_into()
            .map_err(|e: toml::de::Error| invalid(format!("[duct] {e}")))?;
        let activation = match file.activation {
            Some(t) => Some(toml::to_string(&t).map_err(|e| invalid(e.to_string()))?),
            None => None,
        };
        let s = Scenario {
            name: file.name.unwrap_or_else(|| "unnamed".into()),
            seed: file.seed,
            duration_ms: file.duration_ms,
            record_payloads: file.record_payloads.unwrap_or(true),
            link,
            duct,
            bridge: file.bridge,
            workload: file.workload,
            activation,
            states: file.states,
            expect: file.expect,
        };
        s.validate()?;
        Ok(s)
    }

    /// Loads a scenario file, or a bundled scenario by name.
    pub fn load(path_or_name: &str) -> Result<Self, NetsimError> {
        if let Some(text) = bundled(path_or_name) {
            return Self::parse(text);
        }
        let text = std::fs::read_to_string(Path::new(path_or_name))
            .map_err(|e| invalid(format!("{path_or_name}: {e}")))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        if !(self.duration_ms.is_finite() && self.duration_ms >= 0.0) {
            return Err(invalid("duration_ms must be >= 0"));
        }
        self.link.validate()?;
        self.duct.validate().map_err(|e| invalid(e.to_string()))?;
        self.bridge.validate().map_err(|e| invalid(e.to_string()))?;
        for w in &self.workload {
            if self.duct.relay(&w.topic).is_none() {
                return Err(invalid(format!("workload topic {} is not relayed by the duct", w.topic)));
            }
            if !(w.rate_hz.is_finite() && w.rate_hz > 0.0) {
                return Err(invalid(format!("workload {} needs rate_hz > 0", w.topic)));
            }
        }
        match &self.activation {
            Some(doc) => {
                let rules = load_rules(doc, self.duct.relay_topics()).map_err(|e| invalid(e.to_string()))?;
                for s in &self.states {
                    if rules.get(&s.state).is_none() {
                        return Err(invalid(format!("state {:?} has no activation rule", s.state)));
                    }
                }
            }
            None if !self.states.is_empty() => {
                return Err(invalid("states are scripted but there are no activation rules"));
            }
            None => {}
        }
        Ok(())
    }
}

fn make_payload(kind: PayloadKind, size: usize, n: i64, rng: &mut ChaCha8Rng) -> Value {
    let data = match kind {
        PayloadKind::Bytes => {
            let mut b = vec![0u8; size];
            rng.fill_bytes(&mut b);
            Value::Bytes(b)
        }
        PayloadKind::Floats => Value::List(
            (0..size / 8)
                .map(|_| Value::Float(rng.gen_range(-50.0..50.0)))
                .collect(),
        ),
        PayloadKind::Text => Value::Text(
            (0..size)
                .map(|_| char::from(b'a' + rng.gen_range(0..26u8)))
                .collect(),
        ),
    };
    Value::map([("n", Value::Int(n)), ("data", data)])
}

fn payload_seq(v: &Value) -> i64 {
    v.as_map()
        .and_then(|m| m.get("n"))
        .and_then(Value::as_i64)
        .unwrap_or(-1)
}

/// Results of one simulation.
#[derive(Debug, Clone, Default)]
pub struct SimReport {
    pub scenario: String,
    pub duration_us: u64,
    pub trace: Vec<TraceRecord>,
    pub frames: Vec<FrameRecord>,
    pub published: Vec<MessageRecord>,
    pub received: Vec<MessageRecord>,
    pub fresh_sessions: u64,
    pub resumes: u64,
    /// (teardown time, reconnect time) per outage; reconnect is `None` if
    /// the run ended first.
    pub outages: Vec<(u64, Option<u64>)>,
    pub duct_relays: BTreeMap<String, RelayStats>,
    pub bridge_relays: BTreeMap<String, (ThrottleCounters, usize)>,
    pub desired_view: BTreeSet<PeerItem>,
    pub peer_view: BTreeSet<PeerItem>,
    /// What the bridge actually holds for the duct's session.
    pub bridge_view: Option<BTreeSet<PeerItem>>,
    pub activation: Option<ActivationReport>,
    pub final_phase: Option<Phase>,
    pub disconnects: Vec<DisconnectWindow>,
}

impl SimReport {
    pub fn trace_text(&self) -> String {
        let mut out = String::new();
        for r in &self.trace {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }

    pub fn frames_matching<'a>(
        &'a self,
        dir: Direction,
        fate: FrameFate,
    ) -> impl Iterator<Item = &'a FrameRecord> + 'a {
        self.frames
            .iter()
            .filter(move |f| f.dir == dir && f.fate == fate)
    }

    /// Largest number of octets delivered in `dir` within any window of
    /// `window_us` (sliding, anchored at each delivery).
    pub fn max_delivered_in_window(&self, dir: Direction, window_us: u64) -> u64 {
        let deliveries: Vec<(u64, u64)> = self
            .frames_matching(dir, FrameFate::Delivered)
            .map(|f| (f.time_us, f.len as u64))
            .collect();
        let mut best = 0;
        let mut sum = 0;
        let mut lo = 0;
        for hi in 0..deliveries.len() {
            sum += deliveries[hi].1;
            while deliveries[hi].0 - deliveries[lo].0 >= window_us {
                sum -= deliveries[lo].1;
                lo += 1;
            }
            best = best.max(sum);
        }
        best
    }

    /// Checks the scenario's expectations; returns one line per failure.
    pub fn check(&self, expect: &Expectations) -> Vec<String> {
        let mut failures = Vec::new();
        if let Some(n) = expect.resumes_at_least {
            if self.resumes < n {
                failures.push(format!("expected at least {n} resumes, saw {}", self.resumes));
            }
        }
        if expect.lossless {
            let got: BTreeSet<(&str, i64)> = self.received.iter().map(|r| (r.topic.as_str(), r.n)).collect();
            let missing = self
                .published
                .iter()
                .filter(|p| !got.contains(&(p.topic.as_str(), p.n)))
                .count();
            if missing > 0 {
                failures.push(format!("{missing} of {} published messages never arrived", self.published.len()));
            }
        }
        if expect.replay_complete && self.bridge_view.as_ref() != Some(&self.desired_view) {
            failures.push(format!(
                "bridge holds {:?}, duct wants {:?}",
                self.bridge_view, self.desired_view
            ));
        }
        if expect.live_at_end && self.final_phase != Some(Phase::Live) {
            failures.push(format!("duct ended in {:?}", self.final_phase));
        }
        failures
    }
}

#[derive(Debug)]
enum Event {
    Publish(usize),
    State(usize),
    ConnectDone,
    Deliver { dir: Direction, epoch: u64, frame: Frame },
}

/// Shared mutable state that the simulated transports write into.
struct Core {
    now_us: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Event>,
    link: Link,
    codec: Codec,
    epoch: u64,
    live: bool,
    broken: Option<String>,
    trace: Vec<TraceRecord>,
    frames: Vec<FrameRecord>,
}

impl Core {
    fn schedule(&mut self, at_us: u64, e: Event) {
        self.seq += 1;
        self.queue.insert((at_us, self.seq), e);
    }

    fn log(&mut self, event: &'static str, detail: String) {
        self.trace.push(TraceRecord {
            time_us: self.now_us,
            event,
            detail,
        });
    }

    fn log_frame(&mut self, dir: Direction, fate: FrameFate, frame: &Frame) {
        let (op, subject) = match self.codec.decode_frame(frame) {
            Ok(env) => (env.op().as_str().to_owned(), env.subject().unwrap_or("-").to_owned()),
            Err(_) => ("?".to_owned(), "-".to_owned()),
        };
        let event = match fate {
            FrameFate::Sent => "send",
            FrameFate::Delivered => "deliver",
            FrameFate::Lost => "lost",
        };
        self.log(event, format!("{dir} {op} {subject} {}", frame.len()));
        self.frames.push(FrameRecord {
            time_us: self.now_us,
            dir,
            fate,
            op,
            subject,
            len: frame.len(),
        });
    }
}

/// One direction of the current connection, as seen by its sender.
struct Wire<'a> {
    core: &'a mut Core,
    dir: Direction,
}

impl Transport for Wire<'_> {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        let core = &mut *self.core;
        if !core.live || core.broken.is_some() {
            return Err(TransportError::Closed);
        }
        match core.link.transmit(self.dir, frame.len(), core.now_us) {
            Transmission::Deliver { at_us } => {
                core.log_frame(self.dir, FrameFate::Sent, &frame);
                let epoch = core.epoch;
                core.schedule(
                    at_us,
                    Event::Deliver {
                        dir: self.dir,
                        epoch,
                        frame,
                    },
                );
                Ok(())
            }
            Transmission::Teardown => {
                let why = if core.link.profile.down_at(core.now_us) {
                    "link down"
                } else {
                    "frame lost"
                };
                core.broken = Some(format!("{why} while sending {}", self.dir));
                Err(TransportError::Closed)
            }
        }
    }

    fn backlog(&self) -> usize {
        // `Link::backlog` prunes, which needs `&mut`; recompute read-only.
        let pipe = &self.core.link.pipes[self.dir as usize];
        pipe.leaving
            .iter()
            .filter(|&&(done, _)| done > self.core.now_us)
            .map(|&(_, len)| len)
            .sum()
    }

    fn close(&mut self) {
        if self.core.live && self.core.broken.is_none() {
            self.core.broken = Some(format!("closed by {} sender", self.dir));
        }
    }
}

struct BridgeSide<'a> {
    conn: Option<ConnId>,
    wire: Wire<'a>,
}

impl ConnectionSet for BridgeSide<'_> {
    fn transport(&mut self, conn: ConnId) -> Option<&mut dyn Transport> {
        if Some(conn) == self.conn && self.wire.core.live {
            Some(&mut self.wire)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Edge,
    Cloud,
}

struct Source {
    item: WorkloadItem,
    publisher: Publisher,
    rng: ChaCha8Rng,
    count: i64,
    start_us: u64,
    stop_us: u64,
}

/// A running simulation. Most callers want [`run_scenario`].
pub struct Simulation {
    scenario: Scenario,
    clock: Arc<ManualClock>,
    end_us: u64,
    core: Core,
    conn: Option<ConnId>,
    bridge: Bridge,
    duct: Duct,
    controller: Option<ActivationController>,
    sources: Vec<Source>,
    state_pub: Option<Publisher>,
    recorders: Vec<Subscription>,
    published: Vec<MessageRecord>,
    received: Vec<MessageRecord>,
    fresh_sessions: u64,
    resumes: u64,
    outages: Vec<(u64, Option<u64>)>,
    settled_at: Option<u64>,
}

const RETRY_GRANULARITY_US: u64 = 1_000;

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self, NetsimError> {
        scenario.validate()?;
        let s = scenario.clone();
        let clock = Arc::new(ManualClock::new(0));
        let edge = LocalBus::new(clock.clone());
        let cloud = LocalBus::new(clock.clone());
        let bridge = Bridge::new(s.bridge.clone(), cloud.clone()).map_err(|e| invalid(e.to_string()))?;
        let duct = Duct::new(s.duct.clone(), edge.clone(), s.seed ^ 0x5eed_d0c7)
            .map_err(|e| invalid(e.to_string()))?;

        let mut recorders = Vec::new();
        for r in &s.duct.local_topics {
            recorders.push(cloud.subscribe(&r.topic, usize::MAX).map_err(|e| invalid(e.to_string()))?);
        }
        for r in &s.duct.remote_topics {
            recorders.push(edge.subscribe(&r.topic, usize::MAX).map_err(|e| invalid(e.to_string()))?);
        }

        let mut core = Core {
            now_us: 0,
            seq: 0,
            queue: BTreeMap::new(),
            link: Link::new(s.link.clone()),
            codec: Codec::new(s.bridge.max_frame_size),
            epoch: 0,
            live: false,
            broken: None,
            trace: Vec::new(),
            frames: Vec::new(),
        };

        let end_us = ms_to_us(s.duration_ms);
        let mut sources = Vec::new();
        for (i, item) in s.workload.iter().enumerate() {
            let side = if s.duct.local_topics.iter().any(|r| r.topic == item.topic) {
                Side::Edge
            } else {
                Side::Cloud
            };
            let spec = s.duct.relay(&item.topic).expect("validated");
            let bus = if side == Side::Edge { &edge } else { &cloud };
            let publisher = bus
                .advertise(&item.topic, &spec.type_name)
                .map_err(|e| invalid(e.to_string()))?;
            let start_us = ms_to_us(item.start_ms);
            let stop_us = item.stop_ms.map_or(end_us, ms_to_us).min(end_us);
            if start_us < stop_us {
                core.schedule(start_us, Event::Publish(i));
            }
            sources.push(Source {
                item: item.clone(),
                publisher,
                rng: ChaCha8Rng::seed_from_u64(s.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)),
                count: 0,
                start_us,
                stop_us,
            });
        }

        let (controller, state_pub) = match &s.activation {
            Some(doc) => {
                let rules = load_rules(doc, s.duct.relay_topics()).map_err(|e| invalid(e.to_string()))?;
                let c = ActivationController::listening(rules, &duct, &edge, 0).map_err(|e| invalid(e.to_string()))?;
                let p = edge
                    .advertise(STATE_TOPIC, "std/String")
                    .map_err(|e| invalid(e.to_string()))?;
                (Some(c), Some(p))
            }
            None => (None, None),
        };
        for (i, st) in s.states.iter().enumerate() {
            core.schedule(ms_to_us(st.at_ms), Event::State(i));
        }

        Ok(Simulation {
            scenario: s,
            clock,
            end_us,
            core,
            conn: None,
            bridge,
            duct,
            controller,
            sources,
            state_pub,
            recorders,
            published: Vec::new(),
            received: Vec::new(),
            fresh_sessions: 0,
            resumes: 0,
            outages: Vec::new(),
            settled_at: None,
        })
    }

    pub fn now_us(&self) -> u64 {
        self.core.now_us
    }

    pub fn duct(&self) -> &Duct {
        &self.duct
    }

    pub fn bridge(&self) -> &Bridge {
        &self.bridge
    }

    fn next_time(&self) -> Option<u64> {
        let mut next = self.core.queue.keys().next().map(|&(t, _)| t);
        for wake in [self.duct.next_wakeup(), self.bridge.next_wakeup()].into_iter().flatten() {
            let wake = match self.settled_at {
                Some(s) if wake <= s => s + RETRY_GRANULARITY_US,
                _ => wake,
            };
            next = Some(next.map_or(wake, |n| n.min(wake)));
        }
        next
    }

    /// Advances to the next instant with work and does all of it. Returns
    /// the number of events executed, 0 once the run is over.
    pub fn step(&mut self) -> usize {
        let Some(t) = self.next_time() else {
            return 0;
        };
        if t > self.end_us {
            return 0;
        }
        self.core.now_us = self.core.now_us.max(t);
        self.clock.set(self.core.now_us);
        let mut executed = 0;
        while let Some(entry) = self.core.queue.first_entry() {
            if entry.key().0 > self.core.now_us {
                break;
            }
            let event = entry.remove();
            self.execute(event);
            self.settle();
            executed += 1;
        }
        if executed == 0 {
            self.settle();
        }
        executed.max(1)
    }

    pub fn run(mut self) -> SimReport {
        while self.step() > 0 {}
        self.core.now_us = self.end_us.max(self.core.now_us);
        self.finish()
    }

    fn execute(&mut self, event: Event) {
        let now = self.core.now_us;
        match event {
            Event::Publish(i) => {
                let record = self.scenario.record_payloads;
                let src = &mut self.sources[i];
                let payload = make_payload(src.item.payload, src.item.payload_bytes, src.count, &mut src.rng);
                let n = src.count;
                src.count += 1;
                let topic = src.item.topic.clone();
                let _ = src.publisher.publish(payload.clone());
                let next = src.start_us + ((src.count as f64) * 1e6 / src.item.rate_hz).round() as u64;
                let more = next < src.stop_us;
                self.core.log("publish", format!("{topic} #{n}"));
                self.published.push(MessageRecord {
                    time_us: now,
                    topic,
                    n,
                    payload: if record { payload } else { Value::Null },
                });
                if more {
                    self.core.schedule(next, Event::Publish(i));
                }
            }
            Event::State(i) => {
                let state = self.scenario.states[i].state.clone();
                self.core.log("state", state.clone());
                if let Some(p) = &self.state_pub {
                    let _ = p.publish(Value::Text(state));
                }
            }
            Event::ConnectDone => {
                if self.core.link.profile.down_at(now) {
                    self.core.log("connect_failed", "link down".into());
                    self.duct.on_connect_failed(now);
                    return;
                }
                match self.bridge.open(self.scenario.duct.auth_token.as_deref(), now) {
                    Ok(conn) => {
                        self.core.epoch += 1;
                        self.core.live = true;
                        self.core.broken = None;
                        self.core.link.reset();
                        self.conn = Some(conn);
                        self.core.log("connected", format!("conn={}", conn.0));
                        let mut wire = Wire {
                            core: &mut self.core,
                            dir: Direction::Up,
                        };
                        self.duct.on_connected(now, &mut wire);
                        self.check_broken();
                    }
                    Err(e) => {
                        self.core.log("connect_failed", e.to_string());
                        self.duct.on_connect_failed(now);
                    }
                }
            }
            Event::Deliver { dir, epoch, frame } => {
                let Some(conn) = self.conn.filter(|_| self.core.live && epoch == self.core.epoch) else {
                    self.core.log_frame(dir, FrameFate::Lost, &frame);
                    return;
                };
                if self.core.link.profile.down_at(now) {
                    self.core.log_frame(dir, FrameFate::Lost, &frame);
                    self.teardown("link down");
                    return;
                }
                self.core.log_frame(dir, FrameFate::Delivered, &frame);
                match dir {
                    Direction::Up => {
                        let mut wire = Wire {
                            core: &mut self.core,
                            dir: Direction::Down,
                        };
                        let ctl = self.bridge.on_frame(conn, &frame, now, &mut wire);
                        self.check_broken();
                        if ctl == ConnControl::Close {
                            self.teardown("bridge closed the connection");
                        }
                    }
                    Direction::Down => {
                        let mut wire = Wire {
                            core: &mut self.core,
                            dir: Direction::Up,
                        };
                        let req = self.duct.on_frame(&frame, now, &mut wire);
                        self.check_broken();
                        if req == Some(DuctRequest::Close) {
                            self.teardown("duct closed the connection");
                        }
                    }
                }
                self.duct_events();
            }
        }
    }

    /// Lets every component react to what just happened at `now`.
    fn settle(&mut self) {
        let now = self.core.now_us;
        if let Some(c) = self.controller.as_mut() {
            for (_, changes) in c.poll(&mut self.duct, now) {
                for (topic, on) in changes {
                    let detail = format!("{topic} {}", if on { "on" } else { "off" });
                    self.core.log("relay", detail);
                }
            }
        }

        let req = if self.core.live {
            let mut wire = Wire {
                core: &mut self.core,
                dir: Direction::Up,
            };
            self.duct.poll(now, Some(&mut wire))
        } else {
            self.duct.poll(now, None)
        };
        self.check_broken();
        match req {
            Some(DuctRequest::Connect) => {
                self.core.log("connect", String::new());
                let rtt = ms_to_us(2.0 * self.scenario.link.latency_ms);
                self.core.schedule(now + rtt, Event::ConnectDone);
            }
            Some(DuctRequest::Close) => self.teardown("duct keepalive expired"),
            None => {}
        }
        self.duct_events();

        let mut side = BridgeSide {
            conn: self.conn,
            wire: Wire {
                core: &mut self.core,
                dir: Direction::Down,
            },
        };
        let closes = self.bridge.poll(now, &mut side);
        self.check_broken();
        if self.conn.is_some_and(|c| closes.contains(&c)) {
            self.teardown("bridge closed the connection");
        }

        for sub in &self.recorders {
            for m in sub.drain() {
                self.core.trace.push(TraceRecord {
                    time_us: now,
                    event: "receive",
                    detail: format!("{} #{}", m.topic, payload_seq(&m.payload)),
                });
                self.received.push(MessageRecord {
                    time_us: now,
                    topic: m.topic,
                    n: payload_seq(&m.payload),
                    payload: if self.scenario.record_payloads { m.payload } else { Value::Null },
                });
            }
        }
        self.settled_at = Some(now);
    }

    fn check_broken(&mut self) {
        if let Some(reason) = self.core.broken.take() {
            self.teardown(&reason);
        }
    }

    fn teardown(&mut self, reason: &str) {
        let Some(conn) = self.conn.take() else {
            return;
        };
        let now = self.core.now_us;
        self.core.live = false;
        self.core.broken = None;
        self.core.log("teardown", reason.to_owned());
        self.outages.push((now, None));
        self.duct.on_disconnected(now, reason);
        self.bridge.on_close(conn, now);
        self.duct_events();
    }

    fn duct_events(&mut self) {
        for ev in self.duct.take_events() {
            match ev {
                DuctEvent::Established { resumed, replayed } => {
                    if resumed {
                        self.resumes += 1;
                    } else {
                        self.fresh_sessions += 1;
                    }
                    if let Some(o) = self.outages.last_mut().filter(|o| o.1.is_none()) {
                        o.1 = Some(self.core.now_us);
                    }
                    let kind = if resumed { "resume" } else { "session" };
                    self.core.log(kind, format!("replayed={replayed}"));
                }
                DuctEvent::GaveUp => self.core.log("gave_up", String::new()),
                DuctEvent::Disconnected { .. } | DuctEvent::ConnectFailed { .. } => {}
            }
        }
    }

    fn finish(self) -> SimReport {
        let now = self.core.now_us;
        let duct_relays = self
            .duct
            .config()
            .relay_topics()
            .filter_map(|t| self.duct.relay_stats(t).map(|s| (t.to_owned(), s)))
            .collect();
        let session = self.bridge.session(self.duct.session_id());
        let bridge_relays = self
            .scenario
            .duct
            .remote_topics
            .iter()
            .filter_map(|r| {
                self.bridge
                    .relay_counters(self.duct.session_id(), &r.topic)
                    .map(|c| (r.topic.clone(), c))
            })
            .collect();
        let bridge_view = session.map(|s| {
            let mut v = BTreeSet::new();
            v.extend(s.advertised.keys().cloned().map(PeerItem::Advertise));
            v.extend(s.subscriptions.keys().cloned().map(PeerItem::Subscribe));
            v.extend(s.offered_services.iter().cloned().map(PeerItem::Service));
            v
        });
        SimReport {
            scenario: self.scenario.name.clone(),
            duration_us: now,
            trace: self.core.trace,
            frames: self.core.frames,
            published: self.published,
            received: self.received,
            fresh_sessions: self.fresh_sessions,
            resumes: self.resumes,
            outages: self.outages,
            duct_relays,
            bridge_relays,
            desired_view: self.duct.desired_view(),
            peer_view: self.duct.peer_view().clone(),
            bridge_view,
            activation: self.controller.as_ref().map(|c| c.report(&self.duct, now)),
            final_phase: Some(self.duct.phase()),
            disconnects: self.scenario.link.disconnects.clone(),
        }
    }
}

/// Runs a scenario to completion. A scenario with nothing to do (no
/// workload and no scripted states) is not run at all and yields an empty
/// trace.
pub fn run_scenario(scenario: &Scenario) -> Result<SimReport, NetsimError> {
    if scenario.workload.is_empty() && scenario.states.is_empty() {
        scenario.validate()?;
        return Ok(SimReport {
            scenario: scenario.name.clone(),
            disconnects: scenario.link.disconnects.clone(),
            ..SimReport::default()
        });
    }
    Ok(Simulation::new(scenario)?.run())
}
