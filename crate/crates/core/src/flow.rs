//! Per-subscription throttling with a bounded drop-oldest queue.
//!
//! The algorithm never reads a clock: every call takes `now_us`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThrottleSpec {
    /// Minimum interval between emissions in milliseconds; 0 means unlimited.
    pub throttle_rate_ms: u64,
    pub queue_length: usize,
}

impl ThrottleSpec {
    pub fn new(throttle_rate_ms: u64, queue_length: usize) -> Self {
        assert!(queue_length >= 1, "queue_length must be at least 1");
        ThrottleSpec {
            throttle_rate_ms,
            queue_length,
        }
    }

    pub fn unlimited(queue_length: usize) -> Self {
        Self::new(0, queue_length)
    }

    fn interval_us(&self) -> u64 {
        self.throttle_rate_ms * 1000
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission<T> {
    /// Forward this message now.
    Emit(T),
    /// The message waits in the queue.
    Queued,
    /// The message was queued and the oldest queued one evicted.
    Dropped(T),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ThrottleCounters {
    pub admitted: u64,
    pub emitted: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone)]
pub struct ThrottleState<T> {
    last_emit_us: Option<u64>,
    queue: VecDeque<T>,
    counters: ThrottleCounters,
}

impl<T> Default for ThrottleState<T> {
    fn default() -> Self {
        ThrottleState {
            last_emit_us: None,
            queue: VecDeque::new(),
            counters: ThrottleCounters::default(),
        }
    }
}

impl<T> ThrottleState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counters(&self) -> ThrottleCounters {
        self.counters
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn last_emit_us(&self) -> Option<u64> {
        self.last_emit_us
    }

    fn window_open(&self, spec: &ThrottleSpec, now_us: u64) -> bool {
        match self.last_emit_us {
            None => true,
            Some(last) => now_us.saturating_sub(last) >= spec.interval_us(),
        }
    }

    fn record_emit(&mut self, now_us: u64) {
        self.last_emit_us = Some(now_us);
        self.counters.emitted += 1;
    }

    /// Offers a message. It is emitted straight away only if the throttle
    /// window is open and nothing older is waiting.
    pub fn admit(&mut self, spec: &ThrottleSpec, msg: T, now_us: u64) -> Admission<T> {
        self.counters.admitted += 1;
        if self.queue.is_empty() && self.window_open(spec, now_us) {
            self.record_emit(now_us);
            return Admission::Emit(msg);
        }
        self.push(spec, msg)
    }

    /// Queues a message without attempting emission, e.g. while the
    /// downstream link is congested.
    pub fn enqueue(&mut self, spec: &ThrottleSpec, msg: T) -> Admission<T> {
        self.counters.admitted += 1;
        self.push(spec, msg)
    }

    fn push(&mut self, spec: &ThrottleSpec, msg: T) -> Admission<T> {
        let evicted = if self.queue.len() >= spec.queue_length {
            self.counters.dropped += 1;
            self.queue.pop_front()
        } else {
            None
        };
        self.queue.push_back(msg);
        match evicted {
            Some(old) => Admission::Dropped(old),
            None => Admission::Queued,
        }
    }

    /// Drains the queue as throttle windows allow: at most
    /// `floor(elapsed / throttle_rate)` messages, oldest first.
    pub fn tick(&mut self, spec: &ThrottleSpec, now_us: u64) -> Vec<T> {
        self.tick_limited(spec, now_us, usize::MAX)
    }

    /// As [`tick`](Self::tick) but emits at most `limit` messages.
    pub fn tick_limited(&mut self, spec: &ThrottleSpec, now_us: u64, limit: usize) -> Vec<T> {
        if self.queue.is_empty() || limit == 0 {
            return Vec::new();
        }
        let allowed = match (self.last_emit_us, spec.interval_us()) {
            (None, _) | (_, 0) => usize::MAX,
            (Some(last), interval) => (now_us.saturating_sub(last) / interval) as usize,
        };
        let n = allowed.min(limit).min(self.queue.len());
        let out: Vec<T> = self.queue.drain(..n).collect();
        for _ in 0..out.len() {
            self.record_emit(now_us);
        }
        out
    }

    /// When the next queued message may be emitted, if any is waiting.
    pub fn next_ready_us(&self, spec: &ThrottleSpec) -> Option<u64> {
        if self.queue.is_empty() {
            return None;
        }
        Some(match self.last_emit_us {
            None => 0,
            Some(last) => last + spec.interval_us(),
        })
    }

    /// Empties the queue, counting its contents as dropped.
    pub fn discard_queue(&mut self) -> Vec<T> {
        let out: Vec<T> = self.queue.drain(..).collect();
        self.counters.dropped += out.len() as u64;
        out
    }

    /// Counts a message that arrived and was immediately discarded.
    pub fn discard(&mut self) {
        self.counters.admitted += 1;
        self.counters.dropped += 1;
    }

    /// `emitted + queued + dropped == admitted`.
    pub fn is_conserved(&self) -> bool {
        let c = self.counters;
        c.emitted + self.queue.len() as u64 + c.dropped == c.admitted
    }
}
