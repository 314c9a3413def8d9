//! Per-GPU co-serving executor: serving-first temporal sharing with
//! TTFT/TPOT slack-gated rollout admission and stall reporting.
//!
//! One tick plans a contiguous window on an idle instance: the due serving
//! batch first, then rollout items admitted against the remaining slack.
//! Slack-guarded instances take one rollout item per tick so arrivals wait
//! at most one chunk; unguarded ones pack up to `max_rollout_window`.
//! State changes are applied at launch with projected timestamps; page
//! releases and reports happen at the tick that closes the window.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{CostError, LatencyProfile};
use crate::kernel::{GpuId, SimEvent, TrajId};
use crate::kvc::{pages_for, GpuMemory, PressureOutcome, PrefixKey};
use crate::metrics::{LatencySample, SloConfig};
use crate::time::{Micros, SimTime, Slack};

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("SLO budgets must be strictly positive")]
    InvalidSlo,
    #[error("instance role {0:?} needs a serving model profile")]
    MissingServingProfile(InstanceRole),
    #[error(transparent)]
    Cost(#[from] CostError),
}

impl SloConfig {
    pub fn new(ttft: Micros, tpot: Micros) -> Result<Self, ExecError> {
        if ttft == 0 || tpot == 0 {
            return Err(ExecError::InvalidSlo);
        }
        Ok(Self { ttft, tpot })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceRole {
    Prefiller,
    Decoder,
    Colocated,
    /// Dedicated rollout GPU: no serving model resident.
    DedicatedRollout,
}

impl InstanceRole {
    pub fn serves_prefill(self) -> bool {
        matches!(self, InstanceRole::Prefiller | InstanceRole::Colocated)
    }

    pub fn serves_decode(self) -> bool {
        matches!(self, InstanceRole::Decoder | InstanceRole::Colocated)
    }

    pub fn is_serving(self) -> bool {
        self != InstanceRole::DedicatedRollout
    }

    pub fn tick_event(self, gpu: GpuId, generation: u64) -> SimEvent {
        match self {
            InstanceRole::Prefiller => SimEvent::TickPrefiller { gpu, generation },
            InstanceRole::Decoder | InstanceRole::Colocated => SimEvent::TickDecoder { gpu, generation },
            InstanceRole::DedicatedRollout => SimEvent::TickRollout { gpu, generation },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdmissionMode {
    #[default]
    Dual,
    TtftOnly,
    TpotOnly,
    Off,
}

impl AdmissionMode {
    fn uses_ttft(self) -> bool {
        matches!(self, AdmissionMode::Dual | AdmissionMode::TtftOnly)
    }

    fn uses_tpot(self) -> bool {
        matches!(self, AdmissionMode::Dual | AdmissionMode::TpotOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ServingPhase {
    QueuedPrefill,
    Decoding,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServingRequest {
    pub id: u64,
    pub t_arr: SimTime,
    pub prompt_tokens: u64,
    pub target_output: u64,
    pub t_first: Option<SimTime>,
    pub t_last: Option<SimTime>,
    pub tokens_emitted: u64,
    pub phase: ServingPhase,
    pub gaps: Vec<Micros>,
    /// KV was dropped under memory pressure; rejoining recomputes it.
    #[serde(default)]
    pub preempted: bool,
}

impl ServingRequest {
    pub fn new(id: u64, t_arr: SimTime, prompt_tokens: u64, target_output: u64) -> Self {
        Self {
            id,
            t_arr,
            prompt_tokens: prompt_tokens.max(1),
            target_output: target_output.max(1),
            t_first: None,
            t_last: None,
            tokens_emitted: 0,
            phase: ServingPhase::QueuedPrefill,
            gaps: Vec::new(),
            preempted: false,
        }
    }

    pub fn context_tokens(&self) -> u64 {
        self.prompt_tokens + self.tokens_emitted
    }

    fn emit(&mut self, at: SimTime) {
        match self.t_last {
            Some(prev) => self.gaps.push(at - prev),
            None => self.t_first = Some(at),
        }
        self.t_last = Some(at);
        self.tokens_emitted += 1;
        self.phase = if self.tokens_emitted >= self.target_output {
            ServingPhase::Done
        } else {
            ServingPhase::Decoding
        };
    }

    pub fn sample(&self) -> LatencySample {
        LatencySample {
            request_id: self.id,
            t_arr: self.t_arr,
            ttft: self.t_first.map_or(0, |t| t - self.t_arr),
            tpot: self.gaps.clone(),
        }
    }
}

/// Remaining TTFT slack: `(t_arr + B_TTFT) - now - est_prefill`.
pub fn prefill_slack(t_arr: SimTime, b_ttft: Micros, now: SimTime, est_prefill: Micros) -> Slack {
    Slack((t_arr as i64 + b_ttft as i64) - now as i64 - est_prefill as i64)
}

/// Remaining TPOT slack: `(t_last + B_TPOT) - now - est_decode`.
pub fn decode_slack(t_last: SimTime, b_tpot: Micros, now: SimTime, est_decode: Micros) -> Slack {
    Slack((t_last as i64 + b_tpot as i64) - now as i64 - est_decode as i64)
}

/// Minimum of `slacks`; [`Slack::INFINITE`] when empty.
pub fn min_slack(slacks: impl IntoIterator<Item = Slack>) -> Slack {
    slacks.into_iter().min().unwrap_or(Slack::INFINITE)
}

/// Slack that gates rollout work on an instance of `role`.
pub fn applicable_slack(role: InstanceRole, s_prf: Slack, s_dec: Slack) -> Slack {
    match role {
        InstanceRole::Prefiller => s_prf,
        InstanceRole::Decoder => s_dec,
        InstanceRole::Colocated => s_prf.min(s_dec),
        InstanceRole::DedicatedRollout => Slack::INFINITE,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admit,
    Defer,
}

pub fn admit_rollout(est_cost: Micros, safety_margin: Micros, slack: Slack, kvc_ok: bool) -> Admission {
    if kvc_ok && slack.fits(est_cost, safety_margin) {
        Admission::Admit
    } else {
        Admission::Defer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChunkKind {
    PrefillChunk { start: u64, end: u64 },
    DecodeStep { batch: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaunchKind {
    ServingPrefill { requests: Vec<u64>, tokens: u64 },
    ServingDecode { requests: Vec<u64> },
    RolloutPrefill { traj: TrajId, turn: u32, start: u64, end: u64 },
    RolloutDecode { trajs: Vec<TrajId> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Launch {
    pub start: SimTime,
    pub end: SimTime,
    pub est_cost: Micros,
    pub kind: LaunchKind,
}

impl Launch {
    pub fn is_serving(&self) -> bool {
        matches!(self.kind, LaunchKind::ServingPrefill { .. } | LaunchKind::ServingDecode { .. })
    }
}

/// One turn of one trajectory handed to an executor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnWork {
    pub traj: TrajId,
    pub turn_index: u32,
    pub attempt: u32,
    /// Context tokens accumulated by earlier turns.
    pub context_before: u64,
    /// New prompt tokens (environment feedback) this turn.
    pub prompt_tokens: u64,
    pub decode_tokens: u64,
    pub final_turn: bool,
}

impl TurnWork {
    pub fn target_context(&self) -> u64 {
        self.context_before + self.prompt_tokens
    }
}

/// Prefix-cache key of the context a trajectory has before `turn`.
pub fn prefix_key(traj: TrajId, turn: u32) -> PrefixKey {
    assert!(turn < (1 << 20) && traj < (1 << 44), "prefix key space exhausted");
    (traj << 20) | turn as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecReport {
    /// Prefill finished on a prefiller; the request continues on a decoder.
    Handoff { req: ServingRequest },
    ServingDone { sample: LatencySample },
    TurnComplete {
        gpu: GpuId,
        traj: TrajId,
        turn_index: u32,
        attempt: u32,
        at: SimTime,
        cached_tokens: u64,
        prefill_computed: u64,
    },
    Stalled { gpu: GpuId, traj: TrajId, turn_index: u32, attempt: u32, at: SimTime },
    Aborted { gpu: GpuId, traj: TrajId, turn_index: u32, attempt: u32, at: SimTime },
}

#[derive(Debug, Clone, Default)]
pub struct TickResult {
    pub launches: Vec<Launch>,
    pub reports: Vec<ExecReport>,
    pub next_tick: Option<SimTime>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExecConfig {
    pub chunk_tokens: u32,
    pub stall_timeout: Micros,
    pub admission: AdmissionMode,
    pub safety_margin: Micros,
    /// Prefill chunks admitted per rollout round.
    pub prefill_chunks_per_round: u32,
    /// Rollout time one tick may pack on an instance whose serving work is
    /// not slack-guarded. Guarded instances launch one item per tick.
    pub max_rollout_window: Micros,
    pub retry_interval: Micros,
    pub max_prefill_batch_tokens: u64,
    pub max_decode_batch: u32,
    /// Multiplicative execution-time jitter half-width; 0 = exact.
    pub jitter: f64,
    pub usage_sample_interval: Micros,
    pub usage_window: Micros,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            chunk_tokens: 512,
            stall_timeout: 2_000_000,
            admission: AdmissionMode::Dual,
            safety_margin: 0,
            prefill_chunks_per_round: 1,
            max_rollout_window: 250_000,
            retry_interval: 10_000,
            max_prefill_batch_tokens: 4096,
            max_decode_batch: 128,
            jitter: 0.0,
            usage_sample_interval: 1_000_000,
            usage_window: 3_600_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecStats {
    pub admitted: u64,
    pub deferred: u64,
    pub soundness_violations: u64,
    pub stalls: u64,
    pub aborted: u64,
    pub serving_busy: Micros,
    pub serving_preemptions: u64,
    pub peak_serving_pages: u32,
    pub rollout_busy: Micros,
    pub rollout_prefill_tokens: u64,
    pub rollout_decode_tokens: u64,
    pub prefix_hit_turns: u64,
    pub turns_started: u64,
}

#[derive(Debug, Clone)]
struct ActiveTurn {
    work: TurnWork,
    cached: u64,
    prefilled: u64,
    decoded: u64,
    computed: u64,
    last_progress: SimTime,
    finished: bool,
}

impl ActiveTurn {
    fn in_prefill(&self) -> bool {
        !self.finished && self.prefilled < self.work.target_context()
    }

    fn in_decode(&self) -> bool {
        !self.finished && !self.in_prefill() && self.decoded < self.work.decode_tokens
    }

    fn context(&self) -> u64 {
        self.prefilled + self.decoded
    }
}

enum RolloutItem {
    /// Per-trajectory context after the step.
    Decode(Vec<(TrajId, u64)>),
    Chunk { traj: TrajId, start: u64, end: u64 },
}

/// Capacity snapshot the scheduler reads when placing turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerSnapshot {
    pub gpu: GpuId,
    pub alive: bool,
    pub rollout_ready: bool,
    pub active_turns: usize,
    pub rollout_pages: u32,
    pub slack: Slack,
}

pub struct Executor {
    gpu: GpuId,
    role: InstanceRole,
    cfg: ExecConfig,
    slo: SloConfig,
    serving_model: Option<Arc<LatencyProfile>>,
    rollout_model: Arc<LatencyProfile>,
    mem: GpuMemory,
    prefill_queue: VecDeque<ServingRequest>,
    decode_wait: VecDeque<ServingRequest>,
    decoding: Vec<ServingRequest>,
    prefill_release: Vec<u64>,
    serving_done: Vec<ServingRequest>,
    turns: BTreeMap<TrajId, ActiveTurn>,
    fifo: VecDeque<TrajId>,
    busy_until: SimTime,
    rollout_ready_at: Option<SimTime>,
    alive: bool,
    tick_gen: u64,
    tick_at: Option<SimTime>,
    peak_serving: u32,
    prefer_prefill: bool,
    round_chunks: u32,
    usage_samples: VecDeque<(SimTime, u32)>,
    stats: ExecStats,
    rng: ChaCha8Rng,
}

impl Executor {
    pub fn new(
        gpu: GpuId,
        role: InstanceRole,
        cfg: ExecConfig,
        slo: SloConfig,
        serving_model: Option<Arc<LatencyProfile>>,
        rollout_model: Arc<LatencyProfile>,
        mem: GpuMemory,
        rng: ChaCha8Rng,
    ) -> Result<Self, ExecError> {
        if slo.ttft == 0 || slo.tpot == 0 {
            return Err(ExecError::InvalidSlo);
        }
        if role.is_serving() && serving_model.is_none() {
            return Err(ExecError::MissingServingProfile(role));
        }
        // fail early on a missing chunk table
        rollout_model.chunk_cost(cfg.chunk_tokens, 0, 1)?;
        Ok(Self {
            gpu,
            role,
            slo,
            serving_model,
            rollout_model,
            mem,
            prefill_queue: VecDeque::new(),
            decode_wait: VecDeque::new(),
            decoding: Vec::new(),
            prefill_release: Vec::new(),
            serving_done: Vec::new(),
            turns: BTreeMap::new(),
            fifo: VecDeque::new(),
            busy_until: 0,
            rollout_ready_at: (role == InstanceRole::DedicatedRollout).then_some(0),
            alive: true,
            tick_gen: 0,
            tick_at: None,
            peak_serving: 0,
            prefer_prefill: false,
            round_chunks: 0,
            usage_samples: VecDeque::new(),
            stats: ExecStats::default(),
            rng,
            cfg,
        })
    }

    pub fn gpu(&self) -> GpuId {
        self.gpu
    }

    pub fn role(&self) -> InstanceRole {
        self.role
    }

    pub fn config(&self) -> &ExecConfig {
        &self.cfg
    }

    pub fn memory(&self) -> &GpuMemory {
        &self.mem
    }

    pub fn memory_mut(&mut self) -> &mut GpuMemory {
        &mut self.mem
    }

    pub fn stats(&self) -> ExecStats {
        self.stats
    }

    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }

    pub fn is_alive(&self) -> bool {
        self.alive
    }

    pub fn active_turns(&self) -> usize {
        self.turns.len()
    }

    pub fn has_turn(&self, traj: TrajId) -> bool {
        self.turns.contains_key(&traj)
    }

    pub fn serving_backlog(&self) -> usize {
        self.prefill_queue.len() + self.decode_wait.len() + self.decoding.len()
    }

    // ---- costs ----

    fn serving(&self) -> &LatencyProfile {
        self.serving_model.as_deref().expect("serving role has a profile")
    }

    fn est_serving_prefill(&self, tokens: u64) -> Micros {
        self.serving().prefill_latency(tokens.max(1), crate::cost::PrefillMode::Mono).expect("mono table")
    }

    fn est_serving_decode(&self, batch: u64) -> Micros {
        self.serving().decode_step_latency(batch.max(1)).expect("decode table")
    }

    fn est_rollout_chunk(&self, start: u64, end: u64) -> Micros {
        self.rollout_model
            .chunk_cost(self.cfg.chunk_tokens, start, end)
            .expect("chunk table checked at construction")
    }

    fn est_rollout_decode(&self, batch: u64) -> Micros {
        self.rollout_model.decode_step_latency(batch.max(1)).expect("decode table")
    }

    /// Estimated decode latency used in TPOT slack: the largest batch the
    /// next step can run, so requests handed off mid-window stay covered.
    fn est_slack_decode(&self) -> Micros {
        self.est_serving_decode(self.cfg.max_decode_batch as u64)
    }

    fn actual(&mut self, est: Micros) -> Micros {
        if self.cfg.jitter <= 0.0 {
            return est;
        }
        let j = self.cfg.jitter;
        let f: f64 = self.rng.random_range(-j..=j);
        ((est as f64) * (1.0 + f)).round().max(1.0) as Micros
    }

    // ---- inputs ----

    pub fn enqueue_prefill(&mut self, req: ServingRequest) {
        debug_assert!(self.role.serves_prefill());
        self.prefill_queue.push_back(req);
    }

    /// Request whose first token was (or will be) produced elsewhere.
    pub fn enqueue_decode(&mut self, req: ServingRequest) {
        debug_assert!(self.role.serves_decode());
        self.decode_wait.push_back(req);
    }

    /// Starts a rollout turn; returns the number of prefix-cached tokens.
    pub fn assign_turn(&mut self, work: TurnWork, now: SimTime) -> u64 {
        let key = prefix_key(work.traj, work.turn_index);
        let cached = self.mem.rollout_begin(work.traj, Some(key), now).min(work.target_context().saturating_sub(1));
        self.stats.turns_started += 1;
        if cached > 0 {
            self.stats.prefix_hit_turns += 1;
        }
        let traj = work.traj;
        self.turns.insert(
            traj,
            ActiveTurn {
                work,
                cached,
                prefilled: cached,
                decoded: 0,
                computed: 0,
                last_progress: now,
                finished: false,
            },
        );
        self.fifo.retain(|&t| t != traj);
        self.fifo.push_back(traj);
        cached
    }

    /// Enables rollout admission from `ready_at` (runtime activation).
    pub fn activate_rollout(&mut self, ready_at: SimTime) {
        self.rollout_ready_at = Some(ready_at);
    }

    /// Disables rollout and frees all rollout memory. Returns in-flight
    /// trajectories (the caller owns their fate; no reports are produced).
    pub fn deactivate_rollout(&mut self) -> Vec<TrajId> {
        if self.role.is_serving() {
            self.rollout_ready_at = None;
        }
        self.drop_rollout_state()
    }

    fn drop_rollout_state(&mut self) -> Vec<TrajId> {
        let trajs: Vec<TrajId> = self.turns.keys().copied().collect();
        self.turns.clear();
        self.fifo.clear();
        self.mem.clear_rollout();
        trajs
    }

    pub fn rollout_enabled(&self, at: SimTime) -> bool {
        self.alive && self.rollout_ready_at.is_some_and(|r| at >= r)
    }

    pub fn rollout_ready_at(&self) -> Option<SimTime> {
        self.rollout_ready_at
    }

    /// Crash: all volatile state is lost without reports.
    pub fn crash(&mut self, now: SimTime) -> Vec<TrajId> {
        self.alive = false;
        self.busy_until = now;
        self.tick_at = None;
        self.tick_gen += 1;
        self.drop_rollout_state()
    }

    pub fn recover(&mut self, now: SimTime) {
        self.alive = true;
        self.busy_until = now;
    }

    // ---- tick plumbing ----

    /// Requests a tick at `at` (or when the current window ends). Returns
    /// the event to schedule, or `None` if an earlier tick is pending.
    pub fn wake(&mut self, at: SimTime) -> Option<(SimTime, SimEvent)> {
        if !self.alive {
            return None;
        }
        let t = at.max(self.busy_until);
        if self.tick_at.is_some_and(|p| p <= t) {
            return None;
        }
        self.tick_gen += 1;
        self.tick_at = Some(t);
        Some((t, self.role.tick_event(self.gpu, self.tick_gen)))
    }

    /// Whether a tick event with `generation` is the live one.
    pub fn accept_tick(&mut self, generation: u64) -> bool {
        if self.alive && generation == self.tick_gen {
            self.tick_at = None;
            true
        } else {
            false
        }
    }

    // ---- slack ----

    fn s_prf(&self, t: SimTime) -> Slack {
        if !self.role.serves_prefill() {
            return Slack::INFINITE;
        }
        min_slack(
            self.prefill_queue
                .iter()
                .map(|r| prefill_slack(r.t_arr, self.slo.ttft, t, self.est_serving_prefill(r.prompt_tokens))),
        )
    }

    fn s_dec(&self, t: SimTime) -> Slack {
        if !self.role.serves_decode() {
            return Slack::INFINITE;
        }
        let est = self.est_slack_decode();
        min_slack(
            self.decoding
                .iter()
                .chain(self.decode_wait.iter())
                .filter_map(|r| r.t_last)
                .map(|t_last| decode_slack(t_last, self.slo.tpot, t, est)),
        )
    }

    /// Slack that gates rollout admission at time `t` under the configured mode.
    pub fn current_slack(&self, t: SimTime) -> Slack {
        let mode = self.cfg.admission;
        let s_prf = if mode.uses_ttft() { self.s_prf(t) } else { Slack::INFINITE };
        let s_dec = if mode.uses_tpot() { self.s_dec(t) } else { Slack::INFINITE };
        applicable_slack(self.role, s_prf, s_dec)
    }

    /// Independent check of the SLO promise behind an admission: with the
    /// rollout item occupying `[t, t + cost)`, every queued prefill and
    /// every active decode still meets its budget under the cost model.
    fn predicts_violation(&self, t: SimTime, cost: Micros) -> bool {
        let done = t + cost;
        let ttft_bad = self
            .prefill_queue
            .iter()
            .any(|r| done + self.est_serving_prefill(r.prompt_tokens) > r.t_arr + self.slo.ttft);
        let dec = if self.role.serves_decode() { self.est_slack_decode() } else { 0 };
        let tpot_bad = self
            .decoding
            .iter()
            .chain(self.decode_wait.iter())
            .filter_map(|r| r.t_last)
            .any(|t_last| done + dec > t_last + self.slo.tpot);
        (self.role.serves_prefill() && ttft_bad) || (self.role.serves_decode() && tpot_bad)
    }

    pub fn snapshot(&self, now: SimTime) -> WorkerSnapshot {
        WorkerSnapshot {
            gpu: self.gpu,
            alive: self.alive,
            rollout_ready: self.rollout_enabled(now),
            active_turns: self.turns.len(),
            rollout_pages: self.mem.rollout_usage(),
            slack: if self.role.is_serving() { self.current_slack(now.max(self.busy_until)) } else { Slack::INFINITE },
        }
    }

    /// Whether a turn needing `context_tokens` of KV (with whatever prefix is
    /// cached here for it) fits the current rollout budget.
    pub fn turn_fits(&self, traj: TrajId, turn_index: u32, context_tokens: u64) -> bool {
        let tpp = self.mem.config().rollout_tokens_per_page;
        let cached = self
            .mem
            .prefix_entry(prefix_key(traj, turn_index))
            .filter(|e| e.pinned_by.is_none())
            .map_or(0, |e| e.tokens);
        let need = pages_for(context_tokens.saturating_sub(cached), tpp);
        let reserved: u32 = self
            .turns
            .values()
            .map(|a| {
                let target = a.work.target_context() + a.work.decode_tokens;
                pages_for(target.saturating_sub(a.cached), tpp)
            })
            .sum();
        reserved + need <= self.mem.budget().rollout_budget_pages
    }

    /// Trailing-window mean serving KV usage in pages.
    pub fn recent_serving_usage(&self) -> f64 {
        if self.usage_samples.is_empty() {
            return self.mem.serving_usage() as f64;
        }
        self.usage_samples.iter().map(|&(_, u)| u as f64).sum::<f64>() / self.usage_samples.len() as f64
    }

    /// Peak serving usage since the last call; resets the window.
    pub fn take_peak_serving(&mut self) -> u32 {
        let p = self.peak_serving.max(self.mem.serving_usage());
        self.peak_serving = self.mem.serving_usage();
        p
    }

    fn sample_usage(&mut self, now: SimTime) {
        let due = self
            .usage_samples
            .back()
            .is_none_or(|&(t, _)| now >= t + self.cfg.usage_sample_interval);
        if due {
            self.usage_samples.push_back((now, self.mem.serving_usage()));
        }
        while self
            .usage_samples
            .front()
            .is_some_and(|&(t, _)| t + self.cfg.usage_window < now)
        {
            self.usage_samples.pop_front();
        }
    }

    fn has_pending_work(&self) -> bool {
        !self.prefill_queue.is_empty()
            || !self.decode_wait.is_empty()
            || !self.decoding.is_empty()
            || (self.rollout_ready_at.is_some() && !self.turns.is_empty())
    }

    // ---- the tick ----

    pub fn tick(&mut self, now: SimTime) -> TickResult {
        let mut out = TickResult::default();
        if !self.alive {
            return out;
        }
        debug_assert!(self.busy_until <= now, "tick inside a busy window");
        self.close_window(&mut out.reports);
        self.detect_stalls(now, &mut out.reports);
        let mut t = now;
        t = self.launch_serving(now, t, &mut out);
        if let PressureOutcome::EmergencyCut { aborted, .. } = self.mem.on_serving_pressure() {
            self.report_aborted(&aborted, now, &mut out.reports);
        }
        self.peak_serving = self.peak_serving.max(self.mem.serving_usage());
        self.stats.peak_serving_pages = self.stats.peak_serving_pages.max(self.peak_serving);
        t = self.launch_rollout(t, &mut out);
        self.sample_usage(now);
        self.busy_until = t;
        out.next_tick = if t > now {
            Some(t)
        } else {
            let future_join = self
                .decode_wait
                .iter()
                .filter_map(|r| r.t_first)
                .filter(|&f| f > now)
                .min();
            match future_join {
                Some(f) => Some(f.min(now + self.cfg.retry_interval)),
                None => self.has_pending_work().then_some(now + self.cfg.retry_interval),
            }
        };
        out
    }

    fn close_window(&mut self, reports: &mut Vec<ExecReport>) {
        for id in std::mem::take(&mut self.prefill_release) {
            self.mem.serving_release(id);
        }
        for req in std::mem::take(&mut self.serving_done) {
            self.mem.serving_release(req.id);
            reports.push(ExecReport::ServingDone { sample: req.sample() });
        }
        let finished: Vec<TrajId> = self.turns.iter().filter(|(_, a)| a.finished).map(|(&t, _)| t).collect();
        for traj in finished {
            let a = self.turns.remove(&traj).unwrap();
            self.fifo.retain(|&t| t != traj);
            let next_key = (!a.work.final_turn).then(|| prefix_key(traj, a.work.turn_index + 1));
            self.mem
                .rollout_finish_turn(traj, next_key, a.last_progress)
                .expect("active turn holds KV");
            reports.push(ExecReport::TurnComplete {
                gpu: self.gpu,
                traj,
                turn_index: a.work.turn_index,
                attempt: a.work.attempt,
                at: a.last_progress,
                cached_tokens: a.cached,
                prefill_computed: a.computed,
            });
        }
    }

    fn detect_stalls(&mut self, now: SimTime, reports: &mut Vec<ExecReport>) {
        let stalled: Vec<TrajId> = self
            .turns
            .iter()
            .filter(|(_, a)| now.saturating_sub(a.last_progress) >= self.cfg.stall_timeout)
            .map(|(&t, _)| t)
            .collect();
        for traj in stalled {
            let a = self.turns.remove(&traj).unwrap();
            self.fifo.retain(|&t| t != traj);
            self.mem.rollout_abort(traj);
            self.stats.stalls += 1;
            reports.push(ExecReport::Stalled {
                gpu: self.gpu,
                traj,
                turn_index: a.work.turn_index,
                attempt: a.work.attempt,
                at: now,
            });
        }
    }

    fn report_aborted(&mut self, trajs: &[TrajId], now: SimTime, reports: &mut Vec<ExecReport>) {
        for &traj in trajs {
            if let Some(a) = self.turns.remove(&traj) {
                self.fifo.retain(|&t| t != traj);
                self.stats.aborted += 1;
                reports.push(ExecReport::Aborted {
                    gpu: self.gpu,
                    traj,
                    turn_index: a.work.turn_index,
                    attempt: a.work.attempt,
                    at: now,
                });
            }
        }
    }

    fn launch_serving(&mut self, now: SimTime, mut t: SimTime, out: &mut TickResult) -> SimTime {
        if self.role.serves_prefill() && !self.prefill_queue.is_empty() {
            let mut batch = Vec::new();
            let mut tokens = 0;
            while let Some(r) = self.prefill_queue.front() {
                if !batch.is_empty() && tokens + r.prompt_tokens > self.cfg.max_prefill_batch_tokens {
                    break;
                }
                let alloc = self.mem.serving_ensure(r.id, r.prompt_tokens);
                self.report_aborted(&alloc.aborted, now, &mut out.reports);
                if !alloc.granted {
                    break;
                }
                let r = self.prefill_queue.pop_front().unwrap();
                tokens += r.prompt_tokens;
                batch.push(r);
            }
            if !batch.is_empty() {
                let est = self.est_serving_prefill(tokens);
                let dur = self.actual(est);
                let end = t + dur;
                let ids: Vec<u64> = batch.iter().map(|r| r.id).collect();
                for mut r in batch {
                    r.emit(end);
                    if self.role == InstanceRole::Prefiller {
                        self.prefill_release.push(r.id);
                        out.reports.push(ExecReport::Handoff { req: r });
                    } else if r.phase == ServingPhase::Done {
                        self.serving_done.push(r);
                    } else {
                        self.decode_wait.push_back(r);
                    }
                }
                out.launches.push(Launch {
                    start: t,
                    end,
                    est_cost: est,
                    kind: LaunchKind::ServingPrefill { requests: ids, tokens },
                });
                self.stats.serving_busy += dur;
                t = end;
            }
        }
        if self.role.serves_decode() {
            t = self.launch_serving_decode(now, t, out);
        }
        t
    }

    /// One decode step. KV grows a token at a time; when a request cannot
    /// grow, the youngest running request is preempted (pages freed, back
    /// to the head of the wait queue) and recomputed when it rejoins.
    fn launch_serving_decode(&mut self, now: SimTime, t: SimTime, out: &mut TickResult) -> SimTime {
        let mut recompute_tokens = 0;
        while let Some(r) = self.decode_wait.front() {
            if !r.t_first.is_some_and(|f| f <= t) {
                break;
            }
            if r.phase == ServingPhase::Done {
                let r = self.decode_wait.pop_front().unwrap();
                out.reports.push(ExecReport::ServingDone { sample: r.sample() });
                continue;
            }
            if self.decoding.len() as u32 >= self.cfg.max_decode_batch {
                break;
            }
            let alloc = self.mem.serving_ensure(r.id, r.context_tokens() + 1);
            self.report_aborted(&alloc.aborted, now, &mut out.reports);
            if !alloc.granted {
                break;
            }
            let mut r = self.decode_wait.pop_front().unwrap();
            if r.preempted {
                recompute_tokens += r.context_tokens();
                r.preempted = false;
            }
            self.decoding.push(r);
        }
        let mut n = 0;
        while n < self.decoding.len() {
            let (id, need) = (self.decoding[n].id, self.decoding[n].context_tokens() + 1);
            let alloc = self.mem.serving_ensure(id, need);
            self.report_aborted(&alloc.aborted, now, &mut out.reports);
            if alloc.granted {
                n += 1;
                continue;
            }
            let mut victim = self.decoding.pop().unwrap();
            self.mem.serving_release(victim.id);
            victim.preempted = true;
            self.stats.serving_preemptions += 1;
            self.decode_wait.push_front(victim);
        }
        if self.decoding.is_empty() {
            return t;
        }
        let mut est = self.est_serving_decode(self.decoding.len() as u64);
        if recompute_tokens > 0 {
            est += self.est_serving_prefill(recompute_tokens);
        }
        let dur = self.actual(est);
        let end = t + dur;
        let mut ids = Vec::with_capacity(self.decoding.len());
        for r in &mut self.decoding {
            r.emit(end);
            ids.push(r.id);
        }
        let (done, live): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.decoding).into_iter().partition(|r| r.phase == ServingPhase::Done);
        self.decoding = live;
        self.serving_done.extend(done);
        out.launches.push(Launch { start: t, end, est_cost: est, kind: LaunchKind::ServingDecode { requests: ids } });
        self.stats.serving_busy += dur;
        end
    }

    fn admissible(&self, t: SimTime, est: Micros, kvc_ok: bool) -> bool {
        admit_rollout(est, self.cfg.safety_margin, self.current_slack(t), kvc_ok) == Admission::Admit
    }

    /// Whether the admission mode protects serving work this instance runs.
    /// Guarded instances return to serving at every rollout item boundary.
    fn guarded(&self) -> bool {
        let mode = self.cfg.admission;
        (self.role.serves_prefill() && mode.uses_ttft()) || (self.role.serves_decode() && mode.uses_tpot())
    }

    /// Rollout items after the serving launches: decode steps and prefill
    /// chunks alternate. A window only decides where to stop, never which
    /// item comes next, so packing matches one-item-per-tick exactly.
    fn launch_rollout(&mut self, start: SimTime, out: &mut TickResult) -> SimTime {
        if !self.rollout_enabled(start) || self.turns.is_empty() {
            return start;
        }
        let window_end = if self.guarded() { start } else { start + self.cfg.max_rollout_window };
        let mut t = start;
        loop {
            let pick = if self.prefer_prefill {
                self.next_chunk(t).or_else(|| self.next_decode(t))
            } else {
                self.next_decode(t).or_else(|| self.next_chunk(t))
            };
            let Some((item, est)) = pick else {
                break;
            };
            if t > start && t + est > window_end {
                break;
            }
            t = self.launch_item(t, item, est, out);
        }
        t
    }

    /// Decode step over the largest admissible batch, oldest progress first.
    fn next_decode(&mut self, t: SimTime) -> Option<(RolloutItem, Micros)> {
        let mut cands: Vec<(SimTime, TrajId)> = self
            .turns
            .iter()
            .filter(|(_, a)| a.in_decode())
            .map(|(&id, a)| (a.last_progress, id))
            .collect();
        if cands.is_empty() {
            return None;
        }
        cands.sort_unstable();
        for b in (1..=cands.len()).rev() {
            let est = self.est_rollout_decode(b as u64);
            if !self.admissible(t, est, true) {
                continue;
            }
            let growth: Vec<(TrajId, u64)> =
                cands[..b].iter().map(|&(_, id)| (id, self.turns[&id].context() + 1)).collect();
            if self.mem.rollout_can_grow(&growth) {
                return Some((RolloutItem::Decode(growth), est));
            }
        }
        self.stats.deferred += 1;
        None
    }

    /// Next FIFO prefill chunk; head-of-line blocking on defer.
    fn next_chunk(&mut self, t: SimTime) -> Option<(RolloutItem, Micros)> {
        let id = self.fifo.iter().copied().find(|id| self.turns[id].in_prefill())?;
        let a = &self.turns[&id];
        let start = a.prefilled;
        let end = (start + self.cfg.chunk_tokens as u64).min(a.work.target_context());
        let est = self.est_rollout_chunk(start, end);
        let kvc_ok = self.mem.rollout_can_grow(&[(id, end)]);
        if self.admissible(t, est, kvc_ok) {
            Some((RolloutItem::Chunk { traj: id, start, end }, est))
        } else {
            self.stats.deferred += 1;
            None
        }
    }

    /// Launches an admitted item at `t`, running the soundness audit.
    fn launch_item(&mut self, t: SimTime, item: RolloutItem, est: Micros, out: &mut TickResult) -> SimTime {
        self.stats.admitted += 1;
        if self.predicts_violation(t, est) {
            self.stats.soundness_violations += 1;
        }
        let dur = self.actual(est);
        let end = t + dur;
        self.stats.rollout_busy += dur;
        match item {
            RolloutItem::Decode(growth) => {
                self.mem.rollout_grow(&growth, t).expect("checked by admission");
                let mut trajs = Vec::with_capacity(growth.len());
                for (id, _) in growth {
                    let a = self.turns.get_mut(&id).unwrap();
                    a.decoded += 1;
                    a.last_progress = end;
                    if a.decoded >= a.work.decode_tokens {
                        a.finished = true;
                    }
                    trajs.push(id);
                }
                self.stats.rollout_decode_tokens += trajs.len() as u64;
                out.launches.push(Launch { start: t, end, est_cost: est, kind: LaunchKind::RolloutDecode { trajs } });
                self.prefer_prefill = true;
                self.round_chunks = 0;
            }
            RolloutItem::Chunk { traj, start, end: end_tok } => {
                self.mem.rollout_grow(&[(traj, end_tok)], t).expect("checked by admission");
                let a = self.turns.get_mut(&traj).unwrap();
                a.prefilled = end_tok;
                a.computed += end_tok - start;
                a.last_progress = end;
                if a.work.decode_tokens == 0 && !a.in_prefill() {
                    a.finished = true;
                }
                let turn = a.work.turn_index;
                self.stats.rollout_prefill_tokens += end_tok - start;
                out.launches.push(Launch {
                    start: t,
                    end,
                    est_cost: est,
                    kind: LaunchKind::RolloutPrefill { traj, turn, start, end: end_tok },
                });
                self.round_chunks += 1;
                self.prefer_prefill = self.round_chunks < self.cfg.prefill_chunks_per_round;
            }
        }
        end
    }

    /// Consistency checks for invariant-checking runs.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.mem.check_invariants()?;
        for r in self.decoding.iter().chain(self.decode_wait.iter()) {
            if r.tokens_emitted > r.target_output {
                return Err(format!("request {} emitted past its target", r.id));
            }
            if let Some(t) = r.t_last {
                if t < r.t_arr {
                    return Err(format!("request {} has t_last before arrival", r.id));
                }
            }
            if r.gaps.iter().any(|&g| g == 0) {
                return Err(format!("request {} has a zero token gap", r.id));
            }
        }
        for (&id, a) in &self.turns {
            if self.mem.rollout_tokens(id).is_none() {
                return Err(format!("turn of trajectory {id} holds no KV record"));
            }
            if a.prefilled > a.work.target_context() {
                return Err(format!("trajectory {id} prefilled past its context"));
            }
        }
        Ok(())
    }
}

/// Checks serving-first ordering and temporal exclusivity of one window.
pub fn check_launch_list(launches: &[Launch]) -> Result<(), String> {
    let mut seen_rollout = false;
    for w in launches.windows(2) {
        if w[1].start < w[0].end {
            return Err(format!("overlapping executions at {}", w[1].start));
        }
    }
    for l in launches {
        if l.end < l.start {
            return Err("launch ends before it starts".into());
        }
        if l.is_serving() && seen_rollout {
            return Err(format!("serving launch at {} after a rollout launch", l.start));
        }
        seen_rollout |= !l.is_serving();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::ProfileSet;
    use crate::kvc::{KvConfig, MemoryPolicy, DEFAULT_PAGE_SIZE};
    use crate::time::{ms, secs};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn profiles() -> (Arc<LatencyProfile>, Arc<LatencyProfile>) {
        let set = ProfileSet::bundled();
        (
            Arc::new(set.get("qwen2.5-7b", "h800").unwrap().clone()),
            Arc::new(set.get("qwen3-8b", "h800").unwrap().clone()),
        )
    }

    fn mem(total: u32, serving: bool) -> GpuMemory {
        GpuMemory::new(KvConfig {
            total_pages: total,
            page_size: DEFAULT_PAGE_SIZE,
            headroom_fraction: 0.2,
            watermark_into_headroom: 0.0,
            cut_factor: 2,
            lease: secs(10),
            lease_refresh: true,
            prefix_caching: true,
            policy: MemoryPolicy::Preemptive,
            serving_tokens_per_page: 36,
            rollout_tokens_per_page: 14,
            serving_resident: serving,
            serving_layout: "s".into(),
            rollout_layout: "r".into(),
        })
    }

    fn exec(role: InstanceRole, mode: AdmissionMode) -> Executor {
        let (s, r) = profiles();
        let cfg = ExecConfig { admission: mode, ..ExecConfig::default() };
        let mut e = Executor::new(
            0,
            role,
            cfg,
            SloConfig::new(ms(500), ms(150)).unwrap(),
            role.is_serving().then_some(s),
            r,
            mem(8192, role.is_serving()),
            ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        e.activate_rollout(0);
        e
    }

    fn turn(traj: TrajId, turn_index: u32, before: u64, prompt: u64, decode: u64) -> TurnWork {
        TurnWork {
            traj,
            turn_index,
            attempt: 0,
            context_before: before,
            prompt_tokens: prompt,
            decode_tokens: decode,
            final_turn: false,
        }
    }

    #[test]
    fn eq1_example() {
        // t_arr=0, B=500 ms, now=100 ms, T_prf=80 ms
        let oracle = 500 - 100 - 80;
        assert_eq!(prefill_slack(0, ms(500), ms(100), ms(80)), Slack(ms(oracle) as i64));
        assert_eq!(prefill_slack(0, ms(500), ms(420), ms(80)), Slack(0));
        assert!(prefill_slack(0, ms(500), ms(600), ms(80)).0 < 0);
    }

    #[test]
    fn eq2_example() {
        let (s, _) = profiles();
        let est = s.decode_step_latency(16).unwrap();
        // oracle: 1000 + 150 - 1020 - T_dec(16)
        let oracle = (1000 + 150 - 1020) * 1000 - est as i64;
        assert_eq!(decode_slack(ms(1000), ms(150), ms(1020), est), Slack(oracle));
        assert_eq!(oracle, 114_000 - (est as i64 - 16_000));
        assert!(decode_slack(ms(1000), ms(150), ms(1200), est).0 < 0);
    }

    #[test]
    fn min_slack_cases() {
        let v = [Slack(ms(320) as i64), Slack(ms(40) as i64), Slack(ms(900) as i64)];
        assert_eq!(min_slack(v), Slack(ms(40) as i64));
        assert_eq!(min_slack([]), Slack::INFINITE);
    }

    proptest! {
        #[test]
        fn min_slack_matches_scan(v in proptest::collection::vec(-1_000_000i64..1_000_000, 0..50)) {
            let mut oracle = i64::MAX;
            for &x in &v { if x < oracle { oracle = x; } }
            prop_assert_eq!(min_slack(v.iter().map(|&x| Slack(x))).0, oracle);
        }
    }

    #[test]
    fn admission_rule() {
        assert_eq!(admit_rollout(ms(30), ms(5), Slack(ms(114) as i64), true), Admission::Admit);
        assert_eq!(admit_rollout(ms(30), ms(5), Slack(ms(34) as i64), true), Admission::Defer);
        assert_eq!(admit_rollout(ms(30), 0, Slack::INFINITE, true), Admission::Admit);
        assert_eq!(admit_rollout(0, 0, Slack::INFINITE, false), Admission::Defer);
    }

    #[test]
    fn applicable_slack_by_role() {
        let (p, d) = (Slack(10), Slack(20));
        assert_eq!(applicable_slack(InstanceRole::Prefiller, p, d), p);
        assert_eq!(applicable_slack(InstanceRole::Decoder, p, d), d);
        assert_eq!(applicable_slack(InstanceRole::Colocated, p, d), p);
        assert_eq!(applicable_slack(InstanceRole::DedicatedRollout, p, d), Slack::INFINITE);
    }

    #[test]
    fn serving_launches_precede_rollout() {
        let mut e = exec(InstanceRole::Colocated, AdmissionMode::Dual);
        e.assign_turn(turn(1, 0, 0, 600, 4), 0);
        e.enqueue_prefill(ServingRequest::new(1, 0, 1000, 5));
        let r = e.tick(0);
        assert!(r.launches[0].is_serving());
        assert!(r.launches.iter().any(|l| !l.is_serving()));
        check_launch_list(&r.launches).unwrap();
    }

    fn drive(e: &mut Executor, start: SimTime, until: SimTime, arrivals: &mut Vec<ServingRequest>) -> Vec<ExecReport> {
        let mut reports = Vec::new();
        let mut now = start.max(e.busy_until());
        arrivals.sort_by_key(|r| std::cmp::Reverse(r.t_arr));
        while now < until {
            while arrivals.last().is_some_and(|r| r.t_arr <= now) {
                let r = arrivals.pop().unwrap();
                if e.role().serves_prefill() {
                    e.enqueue_prefill(r);
                } else {
                    e.enqueue_decode(r);
                }
            }
            let res = e.tick(now);
            check_launch_list(&res.launches).unwrap();
            e.check_invariants().unwrap();
            reports.extend(res.reports);
            let next_arrival = arrivals.last().map(|r| r.t_arr);
            now = match (res.next_tick, next_arrival) {
                (Some(a), Some(b)) => a.min(b.max(e.busy_until())),
                (Some(a), None) => a,
                (None, Some(b)) => b.max(e.busy_until()),
                (None, None) => break,
            };
        }
        reports
    }

    fn rollout_only_makespan(role: InstanceRole) -> SimTime {
        let mut e = exec(role, AdmissionMode::Dual);
        for t in 0..12 {
            e.assign_turn(turn(t, 0, 0, 700 + 50 * t, 60 + 5 * t), 0);
        }
        let reports = drive(&mut e, 0, secs(600), &mut Vec::new());
        let done: Vec<SimTime> = reports
            .iter()
            .filter_map(|r| match r {
                ExecReport::TurnComplete { at, .. } => Some(*at),
                _ => None,
            })
            .collect();
        assert_eq!(done.len(), 12);
        *done.iter().max().unwrap()
    }

    #[test]
    fn zero_serving_load_matches_dedicated_throughput() {
        let shared = rollout_only_makespan(InstanceRole::Decoder);
        let dedicated = rollout_only_makespan(InstanceRole::DedicatedRollout);
        let ratio = shared as f64 / dedicated as f64;
        assert!((ratio - 1.0).abs() <= 0.01, "shared {shared} vs dedicated {dedicated}");
    }

    #[test]
    fn saturated_prefiller_admits_no_rollout() {
        let mut e = exec(InstanceRole::Prefiller, AdmissionMode::Dual);
        e.assign_turn(turn(1, 0, 0, 600, 4), 0);
        // a backlog of late-ish prompts: every slack below one chunk
        for i in 0..40 {
            e.enqueue_prefill(ServingRequest::new(i, 0, 6000, 2));
        }
        let mut now = 0;
        let mut rollout_launches = 0;
        while now < secs(1) {
            let r = e.tick(now);
            rollout_launches += r.launches.iter().filter(|l| !l.is_serving()).count();
            now = r.next_tick.unwrap();
        }
        assert_eq!(rollout_launches, 0);
    }

    #[test]
    fn stall_reported_after_timeout_only() {
        let mut e = exec(InstanceRole::Prefiller, AdmissionMode::Dual);
        e.assign_turn(turn(9, 0, 0, 600, 4), 0);
        for i in 0..400 {
            e.enqueue_prefill(ServingRequest::new(i, 0, 6000, 2));
        }
        let mut now = 0;
        let mut stalled_at = None;
        while stalled_at.is_none() && now < secs(5) {
            let r = e.tick(now);
            for rep in &r.reports {
                if let ExecReport::Stalled { traj: 9, at, .. } = rep {
                    stalled_at = Some(*at);
                }
            }
            now = r.next_tick.unwrap();
        }
        let at = stalled_at.expect("stall reported");
        assert!(at >= secs(2) && at < secs(2) + secs(1));
        assert_eq!(e.memory().rollout_active_pages(), 0);
    }

    #[test]
    fn idle_under_timeout_not_stalled() {
        let mut e = exec(InstanceRole::Prefiller, AdmissionMode::Dual);
        e.assign_turn(turn(9, 0, 0, 600, 4), 0);
        e.rollout_ready_at = Some(secs(100));
        let r = e.tick(ms(1900));
        assert!(r.reports.is_empty());
        let r = e.tick(ms(2000));
        assert!(matches!(r.reports[0], ExecReport::Stalled { traj: 9, .. }));
    }

    #[test]
    fn stall_leaves_prefix_to_its_lease() {
        let mut e = exec(InstanceRole::DedicatedRollout, AdmissionMode::Dual);
        e.assign_turn(turn(3, 0, 0, 300, 2), 0);
        drive(&mut e, 0, secs(10), &mut Vec::new());
        assert!(e.memory().prefix_entry(prefix_key(3, 1)).is_some());
        let cached = e.assign_turn(turn(3, 1, 302, 100, 2), secs(5));
        assert_eq!(cached, 302);
        e.rollout_ready_at = Some(secs(100));
        let r = e.tick(secs(8));
        assert!(matches!(r.reports[0], ExecReport::Stalled { .. }));
        assert!(e.memory().prefix_entry(prefix_key(3, 1)).is_some());
    }

    #[test]
    fn affinity_hit_charges_incremental_prefill() {
        let mut e = exec(InstanceRole::DedicatedRollout, AdmissionMode::Dual);
        e.assign_turn(turn(3, 0, 0, 1000, 10), 0);
        drive(&mut e, 0, secs(10), &mut Vec::new());
        e.assign_turn(turn(3, 1, 1010, 200, 10), secs(5));
        let reps = drive(&mut e, secs(5), secs(30), &mut Vec::new());
        let computed = reps
            .iter()
            .find_map(|r| match r {
                ExecReport::TurnComplete { prefill_computed, cached_tokens, .. } => Some((*prefill_computed, *cached_tokens)),
                _ => None,
            })
            .unwrap();
        assert_eq!(computed, (200, 1010));
    }

    /// Requests as a decoder sees them: first token already produced.
    fn handed_off(n: u64, gap: Micros) -> Vec<ServingRequest> {
        (0..n)
            .map(|i| {
                let mut r = ServingRequest::new(i, i * gap, 900 + (i * 37) % 600, 40 + (i * 13) % 40);
                r.emit(i * gap);
                r
            })
            .collect()
    }

    fn co_serving_run(mode: AdmissionMode) -> (Vec<LatencySample>, ExecStats) {
        let mut e = exec(InstanceRole::Decoder, mode);
        for t in 0..16 {
            e.assign_turn(turn(t, 0, 0, 2000 + 100 * t, 200), 0);
        }
        let mut arr = handed_off(60, ms(150));
        let reps = drive(&mut e, 0, secs(60), &mut arr);
        let samples = reps
            .into_iter()
            .filter_map(|r| match r {
                ExecReport::ServingDone { sample } => Some(sample),
                _ => None,
            })
            .collect();
        (samples, e.stats())
    }

    #[test]
    fn dual_admission_is_sound_and_meets_slo() {
        let (samples, stats) = co_serving_run(AdmissionMode::Dual);
        assert_eq!(samples.len(), 60);
        assert_eq!(stats.soundness_violations, 0);
        assert!(stats.admitted > 0);
        let rep = crate::metrics::slo_report(&samples, SloConfig { ttft: ms(500), tpot: ms(100) });
        assert!(!rep.violated, "{rep:?}");
    }

    #[test]
    fn admission_off_violates() {
        let (samples, stats) = co_serving_run(AdmissionMode::Off);
        assert!(stats.soundness_violations > 0);
        let rep = crate::metrics::slo_report(&samples, SloConfig { ttft: ms(500), tpot: ms(100) });
        assert!(rep.violated, "{rep:?}");
    }

    #[test]
    fn tick_generation_filters_stale_events() {
        let mut e = exec(InstanceRole::Decoder, AdmissionMode::Dual);
        let (t1, ev1) = e.wake(ms(5)).unwrap();
        assert_eq!(t1, ms(5));
        assert!(e.wake(ms(9)).is_none());
        let (_, ev2) = e.wake(ms(1)).unwrap();
        let gen = |ev: &SimEvent| match ev {
            SimEvent::TickDecoder { generation, .. } => *generation,
            _ => unreachable!(),
        };
        assert!(!e.accept_tick(gen(&ev1)));
        assert!(e.accept_tick(gen(&ev2)));
    }

    #[test]
    fn slo_config_rejects_zero() {
        assert!(matches!(SloConfig::new(0, 1), Err(ExecError::InvalidSlo)));
    }
}
