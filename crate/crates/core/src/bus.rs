//! In-process publish/subscribe broker with a request/response service
//! registry.
//!
//! The bus stands in for the robot middleware on either side of the tunnel.
//! Delivery is pull based: each [`Subscription`] owns a bounded queue that
//! drops its oldest entry when full. Service handlers receive a
//! [`Responder`] and may answer later, which lets a relay forward a call
//! across the network without blocking the caller's thread.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::clock::Clock;
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("invalid name {0:?}: expected /segment[/segment...] with segments of [A-Za-z0-9_]")]
    InvalidName(String),
    #[error("topic {topic} is advertised as {existing}, cannot advertise as {requested}")]
    TypeConflict {
        topic: String,
        existing: String,
        requested: String,
    },
    #[error("publisher handle is closed")]
    HandleClosed,
    #[error("service {0} is already registered")]
    DuplicateService(String),
    #[error("queue_length must be at least 1")]
    InvalidQueueLength,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CallError {
    #[error("no such service {0}")]
    NoSuchService(String),
    #[error("service call timed out")]
    Timeout,
    #[error("service handler failed: {0}")]
    HandlerFailure(String),
}

/// Validated slash-separated name such as `/front_camera/points`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TopicName(String);

impl TopicName {
    pub fn new(name: impl Into<String>) -> Result<Self, BusError> {
        let name = name.into();
        if Self::is_valid(&name) {
            Ok(TopicName(name))
        } else {
            Err(BusError::InvalidName(name))
        }
    }

    pub fn is_valid(name: &str) -> bool {
        let Some(rest) = name.strip_prefix('/') else {
            return false;
        };
        !rest.is_empty()
            && rest.split('/').all(|seg| {
                !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
            })
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for TopicName {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusMessage {
    pub topic: String,
    pub type_name: String,
    pub payload: Value,
    /// Per-publisher, strictly increasing, starting at 1.
    pub seq: i64,
    pub timestamp_us: u64,
    pub publisher: u64,
    /// Set on messages injected by a relay; the relay with the same mark
    /// does not forward them back.
    pub provenance: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicInfo {
    pub name: String,
    pub type_name: Option<String>,
    pub publishers: usize,
    pub subscribers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceInfo {
    pub name: String,
    pub type_name: String,
}

pub type ActivityHook = Arc<dyn Fn() + Send + Sync>;

/// Request handler. It must answer through the [`Responder`], now or later,
/// and must not block.
pub type ServiceHandler = Arc<dyn Fn(Value, Responder) + Send + Sync>;

/// Cheaply cloneable handle to a bus.
#[derive(Clone)]
pub struct LocalBus {
    inner: Arc<BusInner>,
}

struct BusInner {
    clock: Arc<dyn Clock>,
    state: Mutex<BusState>,
    hooks: Mutex<(u64, BTreeMap<u64, ActivityHook>)>,
}

#[derive(Default)]
struct BusState {
    topics: BTreeMap<String, TopicEntry>,
    services: BTreeMap<String, ServiceEntry>,
    next_id: u64,
}

#[derive(Default)]
struct TopicEntry {
    type_name: Option<String>,
    publishers: BTreeSet<u64>,
    subscribers: Vec<Arc<SubQueue>>,
}

struct ServiceEntry {
    id: u64,
    type_name: String,
    handler: ServiceHandler,
}

impl BusState {
    fn id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn prune(&mut self, topic: &str) {
        if let Some(t) = self.topics.get_mut(topic) {
            if t.publishers.is_empty() {
                t.type_name = None;
                if t.subscribers.is_empty() {
                    self.topics.remove(topic);
                }
            }
        }
    }
}

impl BusInner {
    fn notify(&self) {
        let hooks: Vec<ActivityHook> = self.hooks.lock().1.values().cloned().collect();
        for h in hooks {
            h();
        }
    }
}

impl fmt::Debug for LocalBus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalBus")
            .field("topics", &self.topics().len())
            .field("services", &self.services().len())
            .finish()
    }
}

impl LocalBus {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        LocalBus {
            inner: Arc::new(BusInner {
                clock,
                state: Mutex::new(BusState::default()),
                hooks: Mutex::default(),
            }),
        }
    }

    pub fn now_us(&self) -> u64 {
        self.inner.clock.now_us()
    }

    /// Installs a callback fired after every publish and every service
    /// answer. Runtimes use it to wake their polling loop. Returns a key for
    /// [`remove_activity_hook`](Self::remove_activity_hook).
    pub fn add_activity_hook(&self, hook: ActivityHook) -> u64 {
        let mut hooks = self.inner.hooks.lock();
        hooks.0 += 1;
        let key = hooks.0;
        hooks.1.insert(key, hook);
        key
    }

    pub fn remove_activity_hook(&self, key: u64) {
        self.inner.hooks.lock().1.remove(&key);
    }

    pub fn advertise(&self, topic: &str, type_name: &str) -> Result<Publisher, BusError> {
        self.advertise_inner(topic, type_name, None)
    }

    /// Advertises a publisher whose messages carry the provenance `mark`.
    pub fn advertise_relayed(
        &self,
        topic: &str,
        type_name: &str,
        mark: u64,
    ) -> Result<Publisher, BusError> {
        self.advertise_inner(topic, type_name, Some(mark))
    }

    fn advertise_inner(
        &self,
        topic: &str,
        type_name: &str,
        provenance: Option<u64>,
    ) -> Result<Publisher, BusError> {
        let topic = TopicName::new(topic)?;
        let mut st = self.inner.state.lock();
        let id = st.id();
        let entry = st.topics.entry(topic.0.clone()).or_default();
        match &entry.type_name {
            Some(existing) if existing != type_name => {
                return Err(BusError::TypeConflict {
                    topic: topic.0,
                    existing: existing.clone(),
                    requested: type_name.to_owned(),
                })
            }
            _ => entry.type_name = Some(type_name.to_owned()),
        }
        entry.publishers.insert(id);
        Ok(Publisher {
            bus: self.inner.clone(),
            id,
            topic: topic.0,
            type_name: type_name.to_owned(),
            provenance,
            state: Mutex::new(PubState {
                next_seq: 1,
                closed: false,
            }),
        })
    }

    pub fn subscribe(&self, topic: &str, queue_length: usize) -> Result<Subscription, BusError> {
        let topic = TopicName::new(topic)?;
        if queue_length == 0 {
            return Err(BusError::InvalidQueueLength);
        }
        let mut st = self.inner.state.lock();
        let id = st.id();
        let queue = Arc::new(SubQueue {
            id,
            topic: topic.0.clone(),
            capacity: queue_length,
            inner: Mutex::new(SubInner::default()),
        });
        st.topics
            .entry(topic.0)
            .or_default()
            .subscribers
            .push(queue.clone());
        Ok(Subscription {
            bus: self.inner.clone(),
            queue,
        })
    }

    pub fn register_service(
        &self,
        name: &str,
        type_name: &str,
        handler: ServiceHandler,
    ) -> Result<ServiceHandle, BusError> {
        let name = TopicName::new(name)?;
        let mut st = self.inner.state.lock();
        if st.services.contains_key(name.as_str()) {
            return Err(BusError::DuplicateService(name.0));
        }
        let id = st.id();
        st.services.insert(
            name.0.clone(),
            ServiceEntry {
                id,
                type_name: type_name.to_owned(),
                handler,
            },
        );
        Ok(ServiceHandle {
            bus: self.inner.clone(),
            id,
            name: name.0,
            closed: Mutex::new(false),
        })
    }

    /// Registers a handler that answers synchronously.
    pub fn register_fn<F>(&self, name: &str, type_name: &str, f: F) -> Result<ServiceHandle, BusError>
    where
        F: Fn(Value) -> Result<Value, String> + Send + Sync + 'static,
    {
        self.register_service(
            name,
            type_name,
            Arc::new(move |args, responder: Responder| responder.respond(f(args))),
        )
    }

    pub fn service_type(&self, name: &str) -> Option<String> {
        self.inner
            .state
            .lock()
            .services
            .get(name)
            .map(|s| s.type_name.clone())
    }

    /// Starts a call without blocking. The handler runs on the calling
    /// thread; its answer is collected through the returned [`PendingCall`].
    pub fn begin_call(&self, name: &str, args: Value) -> Result<PendingCall, CallError> {
        let handler = {
            let st = self.inner.state.lock();
            st.services
                .get(name)
                .map(|s| s.handler.clone())
                .ok_or_else(|| CallError::NoSuchService(name.to_owned()))?
        };
        let slot = Arc::new(CallSlot::default());
        let responder = Responder {
            slot: Some(slot.clone()),
            bus: Arc::downgrade(&self.inner),
        };
        handler(args, responder);
        Ok(PendingCall { slot })
    }

    /// Blocking call with a deadline. The handler runs on a helper thread
    /// so that a handler which never answers still times out.
    pub fn call(&self, name: &str, args: Value, timeout: Duration) -> Result<Value, CallError> {
        let handler = {
            let st = self.inner.state.lock();
            st.services
                .get(name)
                .map(|s| s.handler.clone())
                .ok_or_else(|| CallError::NoSuchService(name.to_owned()))?
        };
        let slot = Arc::new(CallSlot::default());
        let responder = Responder {
            slot: Some(slot.clone()),
            bus: Arc::downgrade(&self.inner),
        };
        std::thread::spawn(move || handler(args, responder));
        PendingCall { slot }.wait(timeout)
    }

    pub fn topics(&self) -> Vec<TopicInfo> {
        let st = self.inner.state.lock();
        st.topics
            .iter()
            .map(|(name, t)| TopicInfo {
                name: name.clone(),
                type_name: t.type_name.clone(),
                publishers: t.publishers.len(),
                subscribers: t.subscribers.len(),
            })
            .collect()
    }

    pub fn services(&self) -> Vec<ServiceInfo> {
        let st = self.inner.state.lock();
        st.services
            .iter()
            .map(|(name, s)| ServiceInfo {
                name: name.clone(),
                type_name: s.type_name.clone(),
            })
            .collect()
    }
}

struct PubState {
    next_seq: i64,
    closed: bool,
}

/// Publishing side of a topic. Dropping it unadvertises.
pub struct Publisher {
    bus: Arc<BusInner>,
    id: u64,
    topic: String,
    type_name: String,
    provenance: Option<u64>,
    state: Mutex<PubState>,
}

impl fmt::Debug for Publisher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Publisher")
            .field("id", &self.id)
            .field("topic", &self.topic)
            .finish()
    }
}

impl Publisher {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn type_name(&self) -> &str {
        &self.type_name
    }

    /// Publishes `payload` and returns its sequence number.
    pub fn publish(&self, payload: Value) -> Result<i64, BusError> {
        // Held across enqueue so that concurrent publishes on one handle
        // reach every queue in seq order.
        let mut ps = self.state.lock();
        if ps.closed {
            return Err(BusError::HandleClosed);
        }
        let seq = ps.next_seq;
        ps.next_seq += 1;
        let subscribers = {
            let st = self.bus.state.lock();
            st.topics
                .get(&self.topic)
                .map(|t| t.subscribers.clone())
                .unwrap_or_default()
        };
        let msg = BusMessage {
            topic: self.topic.clone(),
            type_name: self.type_name.clone(),
            payload,
            seq,
            timestamp_us: self.bus.clock.now_us(),
            publisher: self.id,
            provenance: self.provenance,
        };
        if let Some((last, rest)) = subscribers.split_last() {
            for q in rest {
                q.push(msg.clone());
            }
            last.push(msg);
        }
        drop(ps);
        self.bus.notify();
        Ok(seq)
    }

    /// Idempotent.
    pub fn unadvertise(&self) {
        let mut ps = self.state.lock();
        if ps.closed {
            return;
        }
        ps.closed = true;
        let mut st = self.bus.state.lock();
        if let Some(t) = st.topics.get_mut(&self.topic) {
            t.publishers.remove(&self.id);
        }
        st.prune(&self.topic);
    }
}

impl Drop for Publisher {
    fn drop(&mut self) {
        self.unadvertise();
    }
}

#[derive(Default)]
struct SubInner {
    queue: VecDeque<BusMessage>,
    dropped: u64,
    received: u64,
    closed: bool,
}

struct SubQueue {
    id: u64,
    topic: String,
    capacity: usize,
    inner: Mutex<SubInner>,
}

impl SubQueue {
    fn push(&self, msg: BusMessage) {
        let mut q = self.inner.lock();
        if q.closed {
            return;
        }
        if q.queue.len() == self.capacity {
            q.queue.pop_front();
            q.dropped += 1;
        }
        q.queue.push_back(msg);
        q.received += 1;
    }
}

/// Receiving side of a topic. Dropping it unsubscribes.
pub struct Subscription {
    bus: Arc<BusInner>,
    queue: Arc<SubQueue>,
}

impl fmt::Debug for Subscription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Subscription")
            .field("id", &self.queue.id)
            .field("topic", &self.queue.topic)
            .finish()
    }
}

impl Subscription {
    pub fn id(&self) -> u64 {
        self.queue.id
    }

    pub fn topic(&self) -> &str {
        &self.queue.topic
    }

    pub fn queue_length(&self) -> usize {
        self.queue.capacity
    }

    pub fn try_recv(&self) -> Option<BusMessage> {
        self.queue.inner.lock().queue.pop_front()
    }

    pub fn drain(&self) -> Vec<BusMessage> {
        self.queue.inner.lock().queue.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.queue.inner.lock().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Messages evicted because the queue was full.
    pub fn dropped(&self) -> u64 {
        self.queue.inner.lock().dropped
    }

    /// Messages that entered the queue, including later evicted ones.
    pub fn received(&self) -> u64 {
        self.queue.inner.lock().received
    }

    /// Idempotent.
    pub fn unsubscribe(&self) {
        {
            let mut q = self.queue.inner.lock();
            if q.closed {
                return;
            }
            q.closed = true;
        }
        let mut st = self.bus.state.lock();
        if let Some(t) = st.topics.get_mut(&self.queue.topic) {
            t.subscribers.retain(|s| s.id != self.queue.id);
        }
        st.prune(&self.queue.topic);
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.unsubscribe();
    }
}

/// Registration of a service. Dropping it unregisters.
pub struct ServiceHandle {
    bus: Arc<BusInner>,
    id: u64,
    name: String,
    closed: Mutex<bool>,
}

impl fmt::Debug for ServiceHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServiceHandle").field("name", &self.name).finish()
    }
}

impl ServiceHandle {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn unregister(&self) {
        let mut closed = self.closed.lock();
        if *closed {
            return;
        }
        *closed = true;
        let mut st = self.bus.state.lock();
        if st.services.get(&self.name).is_some_and(|s| s.id == self.id) {
            st.services.remove(&self.name);
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.unregister();
    }
}

#[derive(Default)]
struct CallSlot {
    result: Mutex<Option<Result<Value, CallError>>>,
    cv: Condvar,
}

/// One-shot answer channel handed to a service handler. Dropping it
/// unanswered fails the call.
pub struct Responder {
    slot: Option<Arc<CallSlot>>,
    bus: std::sync::Weak<BusInner>,
}

impl fmt::Debug for Responder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Responder")
            .field("answered", &self.slot.is_none())
            .finish()
    }
}

impl Responder {
    pub fn respond(mut self, result: Result<Value, String>) {
        self.complete(result.map_err(CallError::HandlerFailure));
    }

    /// Fails the call with a specific error, e.g. [`CallError::Timeout`].
    pub fn fail(mut self, error: CallError) {
        self.complete(Err(error));
    }

    fn complete(&mut self, result: Result<Value, CallError>) {
        if let Some(slot) = self.slot.take() {
            {
                let mut r = slot.result.lock();
                if r.is_none() {
                    *r = Some(result);
                }
            }
            slot.cv.notify_all();
            if let Some(bus) = self.bus.upgrade() {
                bus.notify();
            }
        }
    }
}

impl Drop for Responder {
    fn drop(&mut self) {
        self.complete(Err(CallError::HandlerFailure(
            "service dropped the request".into(),
        )));
    }
}

/// An in-flight service call.
pub struct PendingCall {
    slot: Arc<CallSlot>,
}

impl fmt::Debug for PendingCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PendingCall").finish_non_exhaustive()
    }
}

impl PendingCall {
    /// Takes the answer if it has arrived.
    pub fn try_take(&self) -> Option<Result<Value, CallError>> {
        self.slot.result.lock().take()
    }

    pub fn wait(self, timeout: Duration) -> Result<Value, CallError> {
        let deadline = Instant::now() + timeout;
        let mut r = self.slot.result.lock();
        while r.is_none() {
            if self.slot.cv.wait_until(&mut r, deadline).timed_out() && r.is_none() {
                return Err(CallError::Timeout);
            }
        }
        r.take().expect("checked above")
    }
}
