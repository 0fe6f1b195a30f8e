//! Deterministic discrete-event core: virtual clock, event calendar and
//! seeded random streams.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::SimError;

/// Identifier of the pseudo-random generator used by every stream. Recorded in
/// run metadata so traces can be reproduced by other implementations.
pub const GENERATOR_ID: &str = "ChaCha8 (rand_chacha 0.3), stream seed = splitmix64(seed ^ fnv1a64(label))";

/// Consecutive events allowed at an unchanged clock before the run is aborted.
pub const LIVELOCK_LIMIT: u64 = 10_000_000;

/// A timestamped entry of the event calendar.
#[derive(Debug, Clone)]
pub struct SimEvent<P> {
    pub time: f64,
    pub seq: u64,
    pub payload: P,
}

impl<P> PartialEq for SimEvent<P> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}

impl<P> Eq for SimEvent<P> {}

impl<P> PartialOrd for SimEvent<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for SimEvent<P> {
    // Reversed so that `BinaryHeap` pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Event calendar ordered by time, then by insertion sequence.
#[derive(Debug)]
pub struct EventQueue<P> {
    heap: BinaryHeap<SimEvent<P>>,
    now: f64,
    next_seq: u64,
    stalled: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            now: 0.0,
            next_seq: 0,
            stalled: 0,
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Inserts an event and returns its sequence number.
    pub fn schedule(&mut self, time: f64, payload: P) -> Result<u64, SimError> {
        if !(time >= self.now) || !time.is_finite() {
            return Err(SimError::ScheduleInPast { now: self.now, time });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(SimEvent { time, seq, payload });
        Ok(seq)
    }

    /// Schedules `delay` seconds after the current clock.
    pub fn schedule_in(&mut self, delay: f64, payload: P) -> Result<u64, SimError> {
        self.schedule(self.now + delay, payload)
    }

    /// Removes the next event and advances the clock to its time.
    pub fn pop(&mut self) -> Result<Option<SimEvent<P>>, SimError> {
        let Some(ev) = self.heap.pop() else {
            return Ok(None);
        };
        if ev.time > self.now {
            self.stalled = 0;
        } else {
            self.stalled += 1;
            if self.stalled > LIVELOCK_LIMIT {
                return Err(SimError::Livelock {
                    time: self.now,
                    events: self.stalled,
                });
            }
        }
        self.now = ev.time;
        Ok(Some(ev))
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }
}

/// FNV-1a 64-bit hash of a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// An independent, labelled pseudo-random stream.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let stream_seed = splitmix64(seed ^ fnv1a64(label.as_bytes()));
        Self {
            seed,
            label: label.to_string(),
            rng: ChaCha8Rng::seed_from_u64(stream_seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform variate in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Exponential variate by inverse CDF.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        debug_assert!(rate > 0.0);
        -(1.0 - self.uniform()).ln() / rate
    }

    /// Uniform index in 0..n.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.rng.gen_range(0..n)
    }
}

/// Incremental FNV-1a digest over the processed-event trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceDigest(u64);

impl Default for TraceDigest {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl TraceDigest {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn update_record(&mut self, time: f64, tag: u8, a: u64, b: u64) {
        self.update(&time.to_bits().to_le_bytes());
        self.update(&[tag]);
        self.update(&a.to_le_bytes());
        self.update(&b.to_le_bytes());
    }

    pub fn value(&self) -> u64 {
        self.0
    }

    pub fn hex(&self) -> String {
        format!("{:016x}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_times_pop_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(0.0, "a").unwrap();
        q.schedule(0.0, "b").unwrap();
        q.schedule(0.0, "c").unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.pop().unwrap().map(|e| e.payload)).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
    }

    #[test]
    fn pops_in_time_order() {
        let mut q = EventQueue::new();
        q.schedule(5.0, 5).unwrap();
        q.schedule(2.0, 2).unwrap();
        assert_eq!(q.pop().unwrap().unwrap().time, 2.0);
        assert_eq!(q.now(), 2.0);
        assert_eq!(q.pop().unwrap().unwrap().time, 5.0);
        assert!(q.pop().unwrap().is_none());
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(1.0, ()).unwrap();
        q.pop().unwrap();
        let err = q.schedule(1.0 - 1e-9, ()).unwrap_err();
        assert!(matches!(err, SimError::ScheduleInPast { .. }));
        assert!(q.schedule(f64::NAN, ()).is_err());
    }

    #[test]
    fn livelock_is_detected() {
        let mut q = EventQueue::new();
        let mut outcome = Ok(());
        for _ in 0..(LIVELOCK_LIMIT + 2) {
            q.schedule(0.0, ()).unwrap();
            if let Err(e) = q.pop() {
                outcome = Err(e);
                break;
            }
        }
        assert!(matches!(outcome, Err(SimError::Livelock { .. })));
    }

    #[test]
    fn streams_are_reproducible_and_independent() {
        let mut a = RandomStream::new(7, "arrivals/fn0");
        let mut b = RandomStream::new(7, "arrivals/fn0");
        let mut c = RandomStream::new(7, "arrivals/fn1");
        let xa: Vec<f64> = (0..8).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..8).map(|_| b.uniform()).collect();
        let xc: Vec<f64> = (0..8).map(|_| c.uniform()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn exponential_mean() {
        let mut s = RandomStream::new(1, "exp");
        let n = 200_000;
        let mean = (0..n).map(|_| s.exponential(4.0)).sum::<f64>() / n as f64;
        assert!((mean - 0.25).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
