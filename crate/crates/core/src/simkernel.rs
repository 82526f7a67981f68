//! Discrete-event engine: a single simulated clock, a totally ordered event
//! queue and seed-derived random streams.
//!
//! Events are ordered by `(at, seq)` where `seq` is a global insertion
//! counter, so two events scheduled for the same instant are processed in the
//! order they were scheduled regardless of which node they target.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::io::{self, Write};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Microseconds since simulation start.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    /// Rounds to the nearest microsecond; negative inputs clamp to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e6).round().max(0.0) as u64)
    }

    pub const fn micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl std::ops::Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}s", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

/// Identifier of a node in the body-area network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u8);

impl NodeId {
    pub const EEG: NodeId = NodeId(1);
    pub const ECG: NodeId = NodeId(2);
    pub const GATEWAY: NodeId = NodeId(3);
    pub const DBS: NodeId = NodeId(4);

    pub fn name(self) -> &'static str {
        match self {
            NodeId::EEG => "eeg",
            NodeId::ECG => "ecg",
            NodeId::GATEWAY => "gateway",
            NodeId::DBS => "dbs",
            _ => "node",
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            "node" => write!(f, "node{}", self.0),
            name => f.write_str(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event<K> {
    pub at: SimTime,
    pub seq: u64,
    pub target: NodeId,
    pub kind: K,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("past event: scheduled at {at} but clock is {now}")]
    PastEvent { at: SimTime, now: SimTime },
    #[error("cannot advance clock to {to}: pending event at {next}")]
    AdvancePastEvent { to: SimTime, next: SimTime },
}

/// One processed event, as exported to the line-oriented trace log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub at: SimTime,
    pub seq: u64,
    pub target: NodeId,
    pub kind: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTrace {
    pub entries: Vec<TraceEntry>,
}

impl EventTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push<K: fmt::Display>(&mut self, ev: &Event<K>) {
        self.entries.push(TraceEntry {
            at: ev.at,
            seq: ev.seq,
            target: ev.target,
            kind: ev.kind.to_string(),
        });
    }

    /// One event per line: `time_us seq target kind`.
    pub fn write_log<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.entries {
            writeln!(w, "{} {} {} {}", e.at.0, e.seq, e.target, e.kind)?;
        }
        Ok(())
    }

    pub fn to_log_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_log(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("trace log is utf-8")
    }

    /// True when timestamps are non-decreasing and ties are in `seq` order.
    pub fn is_totally_ordered(&self) -> bool {
        self.entries
            .windows(2)
            .all(|w| (w[0].at, w[0].seq) < (w[1].at, w[1].seq))
    }
}

#[derive(Debug)]
struct Queued<K> {
    at: SimTime,
    seq: u64,
    target: NodeId,
    kind: K,
}

impl<K> PartialEq for Queued<K> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl<K> Eq for Queued<K> {}
impl<K> PartialOrd for Queued<K> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<K> Ord for Queued<K> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// The event queue and clock.
#[derive(Debug)]
pub struct Kernel<K> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued<K>>>,
}

impl<K> Default for Kernel<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K> Kernel<K> {
    pub fn new() -> Self {
        Kernel {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(q)| q.at)
    }

    /// Enqueues an event and returns its sequence number.
    pub fn schedule(&mut self, at: SimTime, target: NodeId, kind: K) -> Result<u64, KernelError> {
        if at < self.now {
            return Err(KernelError::PastEvent { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued {
            at,
            seq,
            target,
            kind,
        }));
        Ok(seq)
    }

    pub fn schedule_event(&mut self, e: Event<K>) -> Result<u64, KernelError> {
        self.schedule(e.at, e.target, e.kind)
    }

    /// Pops the next event if it is due at or before `t_end`, advancing the clock.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<Event<K>> {
        match self.queue.peek() {
            Some(Reverse(q)) if q.at <= t_end => {}
            _ => return None,
        }
        let Reverse(q) = self.queue.pop()?;
        self.now = q.at;
        Some(Event {
            at: q.at,
            seq: q.seq,
            target: q.target,
            kind: q.kind,
        })
    }

    /// Moves the clock forward without processing anything. Fails if an
    /// event is pending before `to`.
    pub fn advance_to(&mut self, to: SimTime) -> Result<(), KernelError> {
        if let Some(next) = self.peek_time() {
            if next < to {
                return Err(KernelError::AdvancePastEvent { to, next });
            }
        }
        if to > self.now {
            self.now = to;
        }
        Ok(())
    }
}

impl<K: fmt::Display> Kernel<K> {
    /// Processes every event due at or before `t_end` in `(at, seq)` order.
    /// The handler may schedule further events through the kernel it is
    /// given. On return the clock equals `t_end`.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> EventTrace
    where
        F: FnMut(&mut Kernel<K>, &Event<K>),
    {
        let mut trace = EventTrace::default();
        while let Some(ev) = self.pop_until(t_end) {
            trace.push(&ev);
            handler(self, &ev);
        }
        if t_end > self.now {
            self.now = t_end;
        }
        trace
    }
}

/// Ordered, thread-safe inbox used to pass externally issued items into the
/// simulation thread. Items are drained at event boundaries.
#[derive(Debug)]
pub struct Mailbox<T> {
    inner: Arc<Mutex<VecDeque<T>>>,
}

impl<T> Clone for Mailbox<T> {
    fn clone(&self) -> Self {
        Mailbox {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T> Default for Mailbox<T> {
    fn default() -> Self {
        Mailbox {
            inner: Arc::new(Mutex::new(VecDeque::new())),
        }
    }
}

impl<T> Mailbox<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, item: T) {
        self.inner.lock().expect("mailbox poisoned").push_back(item);
    }

    pub fn drain(&self) -> Vec<T> {
        self.inner
            .lock()
            .expect("mailbox poisoned")
            .drain(..)
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.lock().expect("mailbox poisoned").is_empty()
    }
}

/// Names one stochastic subsystem's random stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: String,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: impl Into<String>) -> Self {
        RngStream {
            seed,
            stream_id: stream_id.into(),
        }
    }

    /// Derives a child stream, e.g. one per recording or per Monte Carlo chunk.
    pub fn child(&self, index: u64) -> Self {
        RngStream {
            seed: self.seed,
            stream_id: format!("{}/{}", self.stream_id, index),
        }
    }

    pub fn key(&self) -> u64 {
        splitmix64(self.seed ^ fnv1a64(self.stream_id.as_bytes()))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[derive(Debug, Clone, PartialEq, Eq)]
    struct Tick(u32);
    impl fmt::Display for Tick {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            write!(f, "tick({})", self.0)
        }
    }

    #[test]
    fn same_time_events_keep_insertion_order() {
        let mut k = Kernel::new();
        k.schedule(SimTime(10), NodeId::ECG, Tick(0)).unwrap();
        k.schedule(SimTime(10), NodeId::EEG, Tick(1)).unwrap();
        let trace = k.run_until(SimTime(20), |_, _| {});
        let kinds: Vec<_> = trace.entries.iter().map(|e| e.kind.clone()).collect();
        assert_eq!(kinds, ["tick(0)", "tick(1)"]);
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut k = Kernel::new();
        k.schedule(SimTime(100), NodeId::EEG, Tick(0)).unwrap();
        k.run_until(SimTime(200), |_, _| {});
        let err = k.schedule(SimTime(150), NodeId::EEG, Tick(1)).unwrap_err();
        assert!(err.to_string().contains("past event"));
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut k: Kernel<Tick> = Kernel::new();
        let trace = k.run_until(SimTime::from_secs(1), |_, _| {});
        assert!(trace.is_empty());
        assert_eq!(k.now(), SimTime::from_secs(1));
    }

    #[test]
    fn single_event_before_end() {
        let mut k = Kernel::new();
        k.schedule(SimTime(500), NodeId::GATEWAY, Tick(7)).unwrap();
        let trace = k.run_until(SimTime::from_secs(1), |_, _| {});
        assert_eq!(trace.len(), 1);
        assert_eq!(trace.entries[0].at, SimTime(500));
    }

    #[test]
    fn events_after_end_stay_queued() {
        let mut k = Kernel::new();
        k.schedule(SimTime(5), NodeId::EEG, Tick(0)).unwrap();
        k.schedule(SimTime(50), NodeId::EEG, Tick(1)).unwrap();
        let trace = k.run_until(SimTime(10), |_, _| {});
        assert_eq!(trace.len(), 1);
        assert_eq!(k.pending(), 1);
    }

    #[test]
    fn handlers_can_chain_events() {
        let mut k = Kernel::new();
        k.schedule(SimTime(0), NodeId::EEG, Tick(0)).unwrap();
        let trace = k.run_until(SimTime(1_000), |k, ev| {
            if ev.kind.0 < 5 {
                let at = k.now() + SimTime(100);
                k.schedule(at, ev.target, Tick(ev.kind.0 + 1)).unwrap();
            }
        });
        assert_eq!(trace.len(), 6);
        assert_eq!(trace.entries.last().unwrap().at, SimTime(500));
    }

    #[test]
    fn trace_log_line_format() {
        let mut k = Kernel::new();
        k.schedule(SimTime(42), NodeId::DBS, Tick(3)).unwrap();
        let trace = k.run_until(SimTime(100), |_, _| {});
        assert_eq!(trace.to_log_string(), "42 0 dbs tick(3)\n");
    }

    #[test]
    fn advance_refuses_to_skip_events() {
        let mut k = Kernel::new();
        k.schedule(SimTime(10), NodeId::EEG, Tick(0)).unwrap();
        assert!(k.advance_to(SimTime(11)).is_err());
        k.advance_to(SimTime(10)).unwrap();
        assert_eq!(k.now(), SimTime(10));
    }

    fn random_run(seed: u64) -> EventTrace {
        let mut rng = RngStream::new(seed, "kernel-test").rng();
        let mut k = Kernel::new();
        for i in 0..1000 {
            let at = SimTime(rng.random_range(0..10_000));
            k.schedule(at, NodeId((i % 4) as u8 + 1), Tick(i)).unwrap();
        }
        k.run_until(SimTime(10_000), |k, ev| {
            if ev.kind.0 % 7 == 0 && ev.kind.0 < 1000 {
                let at = k.now() + SimTime(13);
                k.schedule(at, ev.target, Tick(ev.kind.0 + 1000)).unwrap();
            }
        })
    }

    #[test]
    fn random_events_come_out_sorted_and_replay_identically() {
        let a = random_run(3);
        // sort-check oracle: the trace must equal its own (at, seq) sort
        let mut sorted = a.entries.clone();
        sorted.sort_by_key(|e| (e.at, e.seq));
        assert_eq!(a.entries, sorted);
        assert!(a.is_totally_ordered());
        assert_eq!(a.to_log_string(), random_run(3).to_log_string());
    }

    #[test]
    fn rng_streams_are_reproducible_and_independent() {
        let draw = |s: RngStream| {
            let mut r = s.rng();
            (0..4).map(|_| r.random::<u64>()).collect::<Vec<_>>()
        };
        let a = draw(RngStream::new(1, "channel"));
        let b = draw(RngStream::new(1, "channel"));
        let c = draw(RngStream::new(1, "generator"));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(
            RngStream::new(1, "x").child(0).key(),
            RngStream::new(1, "x").child(1).key()
        );
    }

    proptest! {
        #[test]
        fn no_event_is_lost(times in proptest::collection::vec(0u64..5_000, 0..200), t_end in 0u64..6_000) {
            let mut k = Kernel::new();
            for (i, &t) in times.iter().enumerate() {
                k.schedule(SimTime(t), NodeId::EEG, Tick(i as u32)).unwrap();
            }
            let trace = k.run_until(SimTime(t_end), |_, _| {});
            let due = times.iter().filter(|&&t| t <= t_end).count();
            prop_assert_eq!(trace.len(), due);
            prop_assert_eq!(k.pending(), times.len() - due);
            prop_assert!(trace.is_totally_ordered());
        }
    }
}
