//! Deterministic discrete-event core: a virtual clock, a totally ordered
//! event queue and named random streams.
//!
//! Events are ordered by `(fire_at, kind ordinal, insertion sequence)`, so two
//! runs that schedule the same events in the same order pop them in the same
//! order regardless of heap internals.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::time::SimTime;

pub type GpuId = u32;
pub type TrajId = u64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KernelError {
    #[error("event scheduled at {fire_at}us but the clock is already at {now}us")]
    SchedulingInPast { fire_at: SimTime, now: SimTime },
    #[error("run_until target {target}us is before the current time {now}us")]
    RunBackwards { target: SimTime, now: SimTime },
}

/// Anything that can sit in the queue. The ordinal breaks ties between
/// events that fire at the same instant.
pub trait EventKind {
    fn ordinal(&self) -> u8;
}

/// Simulator events. Variant order is the tie-break order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimEvent {
    ServingArrival { index: usize },
    RolloutTurnReady { traj: TrajId },
    TickPrefiller { gpu: GpuId, generation: u64 },
    TickDecoder { gpu: GpuId, generation: u64 },
    TickRollout { gpu: GpuId, generation: u64 },
    LeaseExpiry { gpu: GpuId },
    Heartbeat { gpu: GpuId },
    WorkerFailure { gpu: GpuId },
    WorkerRecovery { gpu: GpuId },
    ActivationDone { gpu: GpuId, step: u32 },
    StepBoundary { step: u32 },
    TransferComplete { step: u32 },
    /// Re-examines queued rollout turns.
    DispatchRetry,
}

impl SimEvent {
    pub fn name(&self) -> &'static str {
        match self {
            SimEvent::ServingArrival { .. } => "ServingArrival",
            SimEvent::RolloutTurnReady { .. } => "RolloutTurnReady",
            SimEvent::TickPrefiller { .. } => "TickPrefiller",
            SimEvent::TickDecoder { .. } => "TickDecoder",
            SimEvent::TickRollout { .. } => "TickRollout",
            SimEvent::LeaseExpiry { .. } => "LeaseExpiry",
            SimEvent::Heartbeat { .. } => "Heartbeat",
            SimEvent::WorkerFailure { .. } => "WorkerFailure",
            SimEvent::WorkerRecovery { .. } => "WorkerRecovery",
            SimEvent::ActivationDone { .. } => "ActivationDone",
            SimEvent::StepBoundary { .. } => "StepBoundary",
            SimEvent::TransferComplete { .. } => "TransferComplete",
            SimEvent::DispatchRetry => "DispatchRetry",
        }
    }
}

impl EventKind for SimEvent {
    fn ordinal(&self) -> u8 {
        match self {
            SimEvent::ServingArrival { .. } => 0,
            SimEvent::RolloutTurnReady { .. } => 1,
            SimEvent::TickPrefiller { .. } => 2,
            SimEvent::TickDecoder { .. } => 3,
            SimEvent::TickRollout { .. } => 4,
            SimEvent::LeaseExpiry { .. } => 5,
            SimEvent::Heartbeat { .. } => 6,
            SimEvent::WorkerFailure { .. } => 7,
            SimEvent::WorkerRecovery { .. } => 8,
            SimEvent::ActivationDone { .. } => 9,
            SimEvent::StepBoundary { .. } => 10,
            SimEvent::TransferComplete { .. } => 11,
            SimEvent::DispatchRetry => 12,
        }
    }
}

impl fmt::Display for SimEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimEvent::ServingArrival { index } => write!(f, "ServingArrival {index}"),
            SimEvent::RolloutTurnReady { traj } => write!(f, "RolloutTurnReady {traj}"),
            SimEvent::TickPrefiller { gpu, generation }
            | SimEvent::TickDecoder { gpu, generation }
            | SimEvent::TickRollout { gpu, generation } => {
                write!(f, "{} {gpu} {generation}", self.name())
            }
            SimEvent::LeaseExpiry { gpu }
            | SimEvent::Heartbeat { gpu }
            | SimEvent::WorkerFailure { gpu }
            | SimEvent::WorkerRecovery { gpu } => write!(f, "{} {gpu}", self.name()),
            SimEvent::ActivationDone { gpu, step } => write!(f, "ActivationDone {gpu} {step}"),
            SimEvent::StepBoundary { step } => write!(f, "StepBoundary {step}"),
            SimEvent::TransferComplete { step } => write!(f, "TransferComplete {step}"),
            SimEvent::DispatchRetry => f.write_str("DispatchRetry"),
        }
    }
}

/// Virtual clock; never moves backwards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now: SimTime,
}

impl SimClock {
    pub fn now(&self) -> SimTime {
        self.now
    }

    fn advance(&mut self, to: SimTime) {
        debug_assert!(to >= self.now);
        self.now = to;
    }
}

/// An event popped from the queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheduled<E> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub event: E,
}

struct Entry<E> {
    fire_at: SimTime,
    ordinal: u8,
    seq: u64,
    event: E,
}

impl<E> Entry<E> {
    fn key(&self) -> (SimTime, u8, u64) {
        (self.fire_at, self.ordinal, self.seq)
    }
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on the key
        other.key().cmp(&self.key())
    }
}

/// Priority queue of future events plus the clock they drive.
pub struct EventQueue<E> {
    clock: SimClock,
    heap: BinaryHeap<Entry<E>>,
    next_seq: u64,
    processed: u64,
}

impl<E: EventKind> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: EventKind> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            clock: SimClock::default(),
            heap: BinaryHeap::new(),
            next_seq: 0,
            processed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock.now()
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Total events popped so far.
    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.fire_at)
    }

    /// Enqueues `event`; returns its insertion sequence number.
    pub fn schedule(&mut self, fire_at: SimTime, event: E) -> Result<u64, KernelError> {
        let now = self.clock.now();
        if fire_at < now {
            return Err(KernelError::SchedulingInPast { fire_at, now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry {
            fire_at,
            ordinal: event.ordinal(),
            seq,
            event,
        });
        Ok(seq)
    }

    /// Pops the next event if it fires at or before `t_end`, advancing the clock to it.
    pub fn pop_due(&mut self, t_end: SimTime) -> Option<Scheduled<E>> {
        if self.heap.peek()?.fire_at > t_end {
            return None;
        }
        let entry = self.heap.pop()?;
        self.clock.advance(entry.fire_at);
        self.processed += 1;
        Some(Scheduled {
            fire_at: entry.fire_at,
            seq: entry.seq,
            event: entry.event,
        })
    }

    /// Moves the clock forward without processing anything. Fails if an
    /// unprocessed event would be skipped or the target is in the past.
    pub fn advance_to(&mut self, t: SimTime) -> Result<(), KernelError> {
        let now = self.clock.now();
        if t < now {
            return Err(KernelError::RunBackwards { target: t, now });
        }
        if let Some(next) = self.peek_time() {
            assert!(next > t, "advance_to({t}) would skip an event at {next}");
        }
        self.clock.advance(t);
        Ok(())
    }

    /// Processes every event with `fire_at <= t_end` through `handler`, then
    /// sets the clock to `t_end`. Returns the number of events processed.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> Result<u64, KernelError>
    where
        F: FnMut(&mut Self, Scheduled<E>),
    {
        let now = self.clock.now();
        if t_end < now {
            return Err(KernelError::RunBackwards { target: t_end, now });
        }
        let mut count = 0;
        while let Some(ev) = self.pop_due(t_end) {
            count += 1;
            handler(self, ev);
        }
        self.clock.advance(t_end);
        Ok(count)
    }
}

/// Source of independent, named random streams derived from one seed.
/// Adding a new consumer label never perturbs the existing streams.
#[derive(Debug, Clone, Copy)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub const WORKLOAD: &'static str = "workload-gen";
    pub const ENV_DELAY: &'static str = "env-delay";
    pub const FAILURE: &'static str = "failure-injection";
    pub const TRACE: &'static str = "trace";
    pub const REWARD: &'static str = "reward-oracle";
    pub const JITTER: &'static str = "exec-jitter";

    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        self.substream(label, 0)
    }

    /// A stream further keyed by an index, e.g. one per step.
    pub fn substream(&self, label: &str, index: u64) -> ChaCha8Rng {
        // FNV-1a over the label, then splitmix to decorrelate neighbours.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let mixed = splitmix64(self.seed ^ splitmix64(h ^ splitmix64(index)));
        ChaCha8Rng::seed_from_u64(mixed)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
