//! Virtual clock, event queue, radio channel and event log.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::io::{self, Write};
use std::ops::{Add, Sub};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Virtual time in microseconds since scenario start.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    /// Elapsed time since `earlier`, zero if `earlier` is later.
    pub fn since(self, earlier: SimTime) -> Duration {
        Duration::from_micros(self.0.saturating_sub(earlier.0))
    }

    pub fn saturating_sub(self, d: Duration) -> SimTime {
        SimTime(self.0.saturating_sub(micros(d)))
    }
}

pub fn micros(d: Duration) -> u64 {
    u64::try_from(d.as_micros()).unwrap_or(u64::MAX)
}

impl Add<Duration> for SimTime {
    type Output = SimTime;
    fn add(self, d: Duration) -> SimTime {
        SimTime(self.0.saturating_add(micros(d)))
    }
}

impl Sub for SimTime {
    type Output = Duration;
    fn sub(self, rhs: SimTime) -> Duration {
        self.since(rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}s", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("cannot schedule at {at}, clock is already at {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

struct Entry<E> {
    at: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Priority queue of timed events. Ties fire in insertion order.
pub struct EventQueue<E> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Entry<E>>,
    cancelled: HashSet<u64>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            cancelled: HashSet::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of live (not cancelled) events.
    pub fn len(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn schedule(&mut self, at: SimTime, event: E) -> Result<EventHandle, SimError> {
        if at < self.now {
            return Err(SimError::SchedulingInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { at, seq, event });
        Ok(EventHandle(seq))
    }

    pub fn schedule_in(&mut self, delay: Duration, event: E) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, event)
            .expect("a non-negative delay is never in the past")
    }

    /// Cancels a pending event. Returns false if the handle already fired or was cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_seq || !self.heap.iter().any(|e| e.seq == handle.0) {
            return false;
        }
        self.cancelled.insert(handle.0)
    }

    /// Pops the next event due at or before `t_end` and advances the clock to it.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<(SimTime, E)> {
        loop {
            let top = self.heap.peek()?;
            if top.at > t_end {
                return None;
            }
            let entry = self.heap.pop().expect("peeked");
            if self.cancelled.remove(&entry.seq) {
                continue;
            }
            debug_assert!(entry.at >= self.now);
            self.now = entry.at;
            return Some((entry.at, entry.event));
        }
    }

    /// Moves the clock forward to `t`. No-op if the clock is already past it.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Processes every event due by `t_end` in order and leaves the clock at `t_end`.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> usize
    where
        F: FnMut(&mut EventQueue<E>, SimTime, E),
    {
        let mut n = 0;
        while let Some((t, e)) = self.pop_until(t_end) {
            handler(self, t, e);
            n += 1;
        }
        self.advance_to(t_end);
        n
    }
}

/// 40 kbit/s data rate: 200 µs per byte.
pub const MICROS_PER_BYTE: u64 = 200;

pub fn airtime(bytes: usize) -> Duration {
    Duration::from_micros(bytes as u64 * MICROS_PER_BYTE)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelNode {
    pub position: Position,
    pub range_m: f64,
}

/// Broadcast medium with a hard per-receiver range cutoff. Node indices are
/// assigned by the caller; positions are fixed for the lifetime of the channel.
#[derive(Debug, Clone)]
pub struct RadioChannel {
    nodes: Vec<ChannelNode>,
    neighbours: Vec<Vec<usize>>,
}

impl RadioChannel {
    pub fn new(nodes: Vec<ChannelNode>) -> Self {
        let neighbours = (0..nodes.len())
            .map(|tx| {
                (0..nodes.len())
                    .filter(|&rx| {
                        rx != tx
                            && nodes[tx].position.distance(&nodes[rx].position)
                                <= nodes[rx].range_m
                    })
                    .collect()
            })
            .collect();
        RadioChannel { nodes, neighbours }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, ix: usize) -> &ChannelNode {
        &self.nodes[ix]
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.nodes[a].position.distance(&self.nodes[b].position)
    }

    pub fn in_range(&self, tx: usize, rx: usize) -> bool {
        self.neighbours[tx].contains(&rx)
    }

    /// Nodes that would hear `tx` and whose radio currently admits the transmission.
    pub fn broadcast<F>(&self, tx: usize, mut can_receive: F) -> Vec<usize>
    where
        F: FnMut(usize) -> bool,
    {
        self.neighbours[tx]
            .iter()
            .copied()
            .filter(|&rx| can_receive(rx))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LogMode {
    /// State changes, alarms and alerts; frame traffic is hashed but not written.
    #[default]
    Summary,
    /// Every record, including each transmission and delivery.
    Full,
}

/// Append-only event log. Records are `time_us\tnode\tkind\tdetail`. The hash
/// always covers the full record stream regardless of what is written out.
pub struct EventLog {
    mode: LogMode,
    out: Box<dyn Write + Send>,
    hasher: Sha256,
    line: String,
    records: u64,
    error: Option<io::Error>,
}

impl EventLog {
    pub fn new(mode: LogMode, out: Box<dyn Write + Send>) -> Self {
        EventLog {
            mode,
            out,
            hasher: Sha256::new(),
            line: String::with_capacity(128),
            records: 0,
            error: None,
        }
    }

    pub fn discard() -> Self {
        Self::new(LogMode::Summary, Box::new(io::sink()))
    }

    /// Appends a record. `traffic` records are written only in full mode.
    pub fn record(
        &mut self,
        time: SimTime,
        node: &str,
        kind: &str,
        detail: fmt::Arguments<'_>,
        traffic: bool,
    ) {
        use fmt::Write as _;
        self.line.clear();
        let _ = writeln!(self.line, "{}\t{}\t{}\t{}", time.0, node, kind, detail);
        self.hasher.update(self.line.as_bytes());
        self.records += 1;
        if (!traffic || self.mode == LogMode::Full) && self.error.is_none() {
            if let Err(e) = self.out.write_all(self.line.as_bytes()) {
                self.error = Some(e);
            }
        }
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    /// Flushes the sink and returns the hex digest of the record stream.
    pub fn finish(mut self) -> io::Result<String> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        let digest = self.hasher.finalize();
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn now_fires_before_later_and_ties_keep_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(1), "later").unwrap();
        q.schedule(SimTime(0), "a").unwrap();
        q.schedule(SimTime(0), "b").unwrap();
        let mut seen = Vec::new();
        q.run_until(SimTime(10), |_, _, e| seen.push(e));
        assert_eq!(seen, ["a", "b", "later"]);
        assert_eq!(q.now(), SimTime(10));
    }

    #[test]
    fn past_scheduling_rejected() {
        let mut q: EventQueue<()> = EventQueue::new();
        q.advance_to(SimTime(5));
        assert_eq!(
            q.schedule(SimTime(4), ()),
            Err(SimError::SchedulingInPast {
                at: SimTime(4),
                now: SimTime(5)
            })
        );
    }

    #[test]
    fn empty_run_advances_clock() {
        let mut q: EventQueue<()> = EventQueue::new();
        let hour = SimTime::from_secs(3600);
        assert_eq!(q.run_until(hour, |_, _, _| {}), 0);
        assert_eq!(q.now(), hour);
    }

    #[test]
    fn cancellation() {
        let mut q = EventQueue::new();
        let h = q.schedule(SimTime(3), 1).unwrap();
        q.schedule(SimTime(4), 2).unwrap();
        assert!(q.cancel(h));
        assert!(!q.cancel(h));
        assert_eq!(q.len(), 1);
        let mut seen = Vec::new();
        q.run_until(SimTime(10), |_, _, e| seen.push(e));
        assert_eq!(seen, [2]);
        assert!(!q.cancel(h));
    }

    #[test]
    fn handler_can_schedule_more() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(0), 0u32).unwrap();
        let n = q.run_until(SimTime(1_000), |q, _, k| {
            if k < 9 {
                q.schedule_in(Duration::from_micros(100), k + 1);
            }
        });
        assert_eq!(n, 10);
    }

    #[test]
    fn airtime_at_40kbps() {
        assert_eq!(airtime(5), Duration::from_micros(1_000));
        assert_eq!(airtime(14), Duration::from_micros(2_800));
    }

    #[test]
    fn range_gating() {
        // controller, contact sensor, attacker
        let ch = RadioChannel::new(vec![
            ChannelNode {
                position: Position::new(0.0, 0.0),
                range_m: 100.0,
            },
            ChannelNode {
                position: Position::new(0.0, 60.0),
                range_m: 40.0,
            },
            ChannelNode {
                position: Position::new(100.0, 0.0),
                range_m: 150.0,
            },
        ]);
        assert_eq!(ch.broadcast(2, |_| true), vec![0]);
        assert_eq!(ch.broadcast(2, |rx| rx != 0), Vec::<usize>::new());
        assert_eq!(ch.broadcast(0, |_| true), vec![2]);
        assert!(ch.in_range(1, 0));
        assert!(!ch.in_range(0, 1));
    }

    #[test]
    fn log_hash_covers_traffic_but_summary_omits_it() {
        use std::sync::{Arc, Mutex};

        #[derive(Clone, Default)]
        struct Shared(Arc<Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, b: &[u8]) -> io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }

        let run = |mode, extra: bool| {
            let buf = Shared::default();
            let mut log = EventLog::new(mode, Box::new(buf.clone()));
            log.record(SimTime(1), "dev05", "wake", format_args!("heartbeat"), false);
            log.record(SimTime(2), "atk", "tx", format_args!("NonceGet"), true);
            if extra {
                log.record(SimTime(3), "atk", "tx", format_args!("NonceGet"), true);
            }
            let hash = log.finish().unwrap();
            let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
            (hash, text)
        };
        let (h1, summary) = run(LogMode::Summary, false);
        let (h2, full) = run(LogMode::Full, false);
        let (h3, _) = run(LogMode::Summary, true);
        assert_eq!(h1, h2);
        assert_ne!(h1, h3);
        assert_eq!(summary, "1\tdev05\twake\theartbeat\n");
        assert_eq!(full.lines().count(), 2);
    }
}
