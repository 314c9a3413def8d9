//! The simulated cluster: dedicated rollout GPUs plus serving GPUs split
//! into prefill and decode instances, driven by one event queue.
//!
//! GPU ids: dedicated GPUs first (`0..dedicated`), then serving GPUs.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::config::{ConfigError, SimConfig};
use crate::cost::{CostError, LatencyProfile, ProfileSet};
use crate::eventlog::{EventLog, LogRecord, Replay, EVENTLOG_SCHEMA};
use crate::executor::{
    check_launch_list, ExecError, ExecReport, ExecStats, Executor, InstanceRole, ServingRequest, TurnWork,
};
use crate::kernel::{EventQueue, GpuId, KernelError, RngStreams, SimEvent, TrajId};
use crate::kvc::{pages_for, GpuMemory, KvConfig, MemoryStats};
use crate::metrics::{LatencySample, RunSummary, SloConfig, StepMetrics};
use crate::scheduler::{ClusterProbe, LossOutcome, SchedError, SchedStats, Scheduler, TurnOutcome, WorkerKind, WorkerView};
use crate::time::{secs_f64, Micros, SimTime, Slack};
use crate::workload::{
    generate_trajectories, load_serving_trace, scale_trace, GroupSampler, ServingTraceRecord, StepPlan, StepTimeline,
    WorkloadError,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("event log: {0}")]
    Log(#[from] std::io::Error),
    #[error("replay: {0}")]
    Replay(#[from] crate::eventlog::LogError),
    #[error("invariant violated at t={at}us after {event}: {message}")]
    Invariant { at: SimTime, event: String, message: String },
}

#[derive(Debug, Clone)]
pub struct GpuReport {
    pub gpu: GpuId,
    pub role: InstanceRole,
    pub exec: ExecStats,
    pub memory: MemoryStats,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub summary: RunSummary,
    pub samples: Vec<LatencySample>,
    pub steps: Vec<StepMetrics>,
    pub gpus: Vec<GpuReport>,
    pub sched: SchedStats,
    pub log_digest: String,
    pub records: Option<Vec<crate::eventlog::LogRecord>>,
    /// Whether every configured step finished before the time limit.
    pub completed: bool,
    pub invariant_checks: u64,
}

/// The serving arrivals a run with `cfg` replays.
pub fn serving_trace(cfg: &SimConfig) -> Result<Vec<ServingTraceRecord>, SimError> {
    let mut rng = RngStreams::new(cfg.sim.seed).stream(RngStreams::TRACE);
    let s = &cfg.serving;
    Ok(match &s.trace {
        Some(p) => load_serving_trace(p, s.time_scale, s.rate_scale, &mut rng)?,
        None => {
            let raw = s.synthetic.generate(secs_f64(cfg.sim.max_time_s), &mut rng)?;
            scale_trace(&raw, s.time_scale, s.rate_scale, &mut rng)?
        }
    })
}

/// Runs one configuration to completion.
pub fn run(cfg: &SimConfig, scenario: &str, variant: &str, log: EventLog) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let log = if log.retained().is_some() { log } else { log.retaining() };
    let mut w = World::build(cfg, scenario, variant, log)?;
    w.run()?;
    w.finish()
}

struct Probe<'a> {
    execs: &'a [Executor],
    min_rollout_step: Micros,
}

impl ClusterProbe for Probe<'_> {
    fn view(&self, gpu: GpuId, work: &TurnWork, now: SimTime) -> WorkerView {
        let e = &self.execs[gpu as usize];
        let slack = if e.role().is_serving() { e.current_slack(now.max(e.busy_until())) } else { Slack::INFINITE };
        WorkerView {
            alive: e.is_alive(),
            rollout_ready: e.rollout_enabled(now),
            fits: e.turn_fits(work.traj, work.turn_index, work.target_context() + work.decode_tokens),
            slack_ok: slack.fits(self.min_rollout_step, 0),
            rollout_pages: e.memory().rollout_usage(),
        }
    }
}

struct StepState {
    index: u32,
    start: SimTime,
    sampler: GroupSampler,
    remaining: BTreeMap<u64, u64>,
    wl_rng: ChaCha8Rng,
    reward_rng: ChaCha8Rng,
}

struct World {
    cfg: SimConfig,
    scenario: String,
    variant: String,
    streams: RngStreams,
    queue: EventQueue<SimEvent>,
    execs: Vec<Executor>,
    dedicated: Vec<GpuId>,
    serving: Vec<GpuId>,
    prefillers: Vec<GpuId>,
    decoders: Vec<GpuId>,
    sched: Scheduler,
    trace: Vec<ServingTraceRecord>,
    min_rollout_step: Micros,
    step: Option<StepState>,
    next_group: u64,
    next_traj: TrajId,
    traj_step: BTreeMap<TrajId, u32>,
    lease_armed: Vec<Option<SimTime>>,
    retry_armed: bool,
    failure_rng: ChaCha8Rng,
    log: EventLog,
    max_time: SimTime,
    finished_at: Option<SimTime>,
    invariant_checks: u64,
    /// GPUs mutated since the last invariant sweep.
    touched: Vec<bool>,
}

impl World {
    fn build(cfg: &SimConfig, scenario: &str, variant: &str, log: EventLog) -> Result<Self, SimError> {
        let profiles = match &cfg.profiles.path {
            Some(p) => ProfileSet::load(p)?,
            None => ProfileSet::bundled(),
        };
        let c = &cfg.cluster;
        let rollout_model = Arc::new(profiles.get(&c.rollout_model, &c.gpu_class)?.clone());
        let serving_model: Arc<LatencyProfile> = Arc::new(profiles.get(&c.serving_model, &c.gpu_class)?.clone());
        let streams = RngStreams::new(cfg.sim.seed);
        let slo = SloConfig::new(secs_f64(cfg.serving.ttft_ms / 1e3), secs_f64(cfg.serving.tpot_ms / 1e3))?;
        let m = &cfg.memory;
        let lease = secs_f64(m.lease_s);
        let mut execs = Vec::new();
        let mut sched = Scheduler::new(cfg.scheduler.clone());
        let (mut dedicated, mut serving, mut prefillers, mut decoders) = (vec![], vec![], vec![], vec![]);
        for i in 0..c.dedicated_gpus {
            let gpu = i;
            let mut kv = KvConfig::dedicated(m.dedicated_pages, m.rollout_tokens_per_page, lease, m.prefix_caching);
            kv.page_size = m.page_size;
            kv.lease_refresh = m.lease_refresh;
            execs.push(Executor::new(
                gpu,
                InstanceRole::DedicatedRollout,
                cfg.executor.clone(),
                slo,
                None,
                rollout_model.clone(),
                GpuMemory::new(kv),
                streams.substream(RngStreams::JITTER, gpu as u64),
            )?);
            sched.add_worker(gpu, WorkerKind::Dedicated, 0)?;
            dedicated.push(gpu);
        }
        for j in 0..c.serving_gpus {
            let gpu = c.dedicated_gpus + j;
            let role = if !c.pd_disaggregated {
                InstanceRole::Colocated
            } else if j < c.prefillers {
                InstanceRole::Prefiller
            } else {
                InstanceRole::Decoder
            };
            let kv = KvConfig {
                total_pages: m.total_pages,
                page_size: m.page_size,
                headroom_fraction: m.headroom_fraction,
                watermark_into_headroom: m.watermark_into_headroom,
                cut_factor: m.cut_factor,
                lease,
                lease_refresh: m.lease_refresh,
                prefix_caching: m.prefix_caching,
                policy: m.policy,
                serving_tokens_per_page: m.serving_tokens_per_page,
                rollout_tokens_per_page: m.rollout_tokens_per_page,
                serving_resident: true,
                serving_layout: c.serving_model.clone(),
                rollout_layout: c.rollout_model.clone(),
            };
            execs.push(Executor::new(
                gpu,
                role,
                cfg.executor.clone(),
                slo,
                Some(serving_model.clone()),
                rollout_model.clone(),
                GpuMemory::new(kv),
                streams.substream(RngStreams::JITTER, gpu as u64),
            )?);
            sched.add_worker(gpu, WorkerKind::Serving, 0)?;
            serving.push(gpu);
            match role {
                InstanceRole::Prefiller => prefillers.push(gpu),
                InstanceRole::Decoder => decoders.push(gpu),
                _ => {
                    prefillers.push(gpu);
                    decoders.push(gpu);
                }
            }
        }
        let trace = if serving.is_empty() { Vec::new() } else { serving_trace(cfg)? };
        // a decoder reserves prompt + output at join; one request must fit alone
        if let Some(e) = serving.first().map(|&g| &execs[g as usize]) {
            let tpp = m.serving_tokens_per_page;
            let cap = e.memory().serving_capacity_pages();
            if let Some(r) = trace.iter().find(|r| pages_for(r.prompt_tokens + r.output_tokens, tpp) > cap) {
                return Err(ConfigError::Invalid {
                    key: "memory.total_pages",
                    reason: format!(
                        "request at {} us needs {} serving pages, capacity is {cap}",
                        r.t_arr,
                        pages_for(r.prompt_tokens + r.output_tokens, tpp)
                    ),
                }
                .into());
            }
        }
        let min_rollout_step = rollout_model.decode_step_latency(1)?;
        let n = execs.len();
        Ok(Self {
            cfg: cfg.clone(),
            scenario: scenario.to_string(),
            variant: variant.to_string(),
            streams,
            queue: EventQueue::new(),
            execs,
            dedicated,
            serving,
            prefillers,
            decoders,
            sched,
            trace,
            min_rollout_step,
            step: None,
            next_group: 0,
            next_traj: 0,
            traj_step: BTreeMap::new(),
            lease_armed: vec![None; n],
            retry_armed: false,
            failure_rng: streams.stream(RngStreams::FAILURE),
            log,
            max_time: secs_f64(cfg.sim.max_time_s),
            finished_at: None,
            invariant_checks: 0,
            touched: vec![true; n],
        })
    }

    fn gpu_count(&self) -> u32 {
        self.execs.len() as u32
    }

    fn run(&mut self) -> Result<(), SimError> {
        let c = &self.cfg;
        self.log.write(LogRecord::Run {
            schema: EVENTLOG_SCHEMA.into(),
            scenario: self.scenario.clone(),
            variant: self.variant.clone(),
            seed: c.sim.seed,
            gpus: self.gpu_count(),
            activation_us: secs_f64(c.cluster.activation_s),
            ttft_budget_us: secs_f64(c.serving.ttft_ms / 1e3),
            tpot_budget_us: secs_f64(c.serving.tpot_ms / 1e3),
        })?;
        self.queue.schedule(0, SimEvent::StepBoundary { step: 0 })?;
        if !self.trace.is_empty() {
            self.queue.schedule(self.trace[0].t_arr, SimEvent::ServingArrival { index: 0 })?;
        }
        let period = self.cfg.scheduler.heartbeat_period;
        for g in 0..self.gpu_count() {
            self.queue.schedule(period, SimEvent::Heartbeat { gpu: g })?;
        }
        if self.cfg.failures.enabled {
            for g in self.dedicated.clone() {
                let t = self.draw_exp(self.cfg.failures.mtbf_s);
                self.queue.schedule(t, SimEvent::WorkerFailure { gpu: g })?;
            }
        }
        while self.finished_at.is_none() {
            let Some(ev) = self.queue.pop_due(self.max_time) else { break };
            let now = ev.fire_at;
            let label = if self.cfg.sim.check_invariants { Some(ev.event.to_string()) } else { None };
            self.handle(now, ev.event)?;
            if let Some(label) = label {
                self.check_all(now, &label)?;
            }
        }
        Ok(())
    }

    fn draw_exp(&mut self, mean_s: f64) -> SimTime {
        let now = self.queue.now();
        let d = Exp::new(1.0 / mean_s).expect("validated positive").sample(&mut self.failure_rng);
        now + secs_f64(d).max(1)
    }

    fn exec_mut(&mut self, gpu: GpuId) -> &mut Executor {
        self.touched[gpu as usize] = true;
        &mut self.execs[gpu as usize]
    }

    /// Deep checks (page recount, ownership) on GPUs mutated since the last
    /// sweep; counter-level conservation and caps on every GPU.
    fn check_all(&mut self, now: SimTime, event: &str) -> Result<(), SimError> {
        self.invariant_checks += 1;
        let fail = |message: String| SimError::Invariant { at: now, event: event.to_string(), message };
        for (e, touched) in self.execs.iter().zip(self.touched.iter_mut()) {
            if std::mem::take(touched) {
                e.check_invariants().map_err(|m| fail(format!("gpu {}: {m}", e.gpu())))?;
                if !e.memory().pool().conservation_holds() {
                    return Err(fail(format!("gpu {}: page conservation", e.gpu())));
                }
            }
            let m = e.memory();
            if m.free_pages() + m.serving_usage() + m.rollout_usage() != m.total_pages() {
                return Err(fail(format!("gpu {}: page counters do not sum to capacity", e.gpu())));
            }
            if e.role() == InstanceRole::DedicatedRollout && e.active_turns() > self.cfg.scheduler.concurrency_cap as usize {
                return Err(fail(format!("gpu {}: concurrency cap exceeded", e.gpu())));
            }
        }
        self.sched.check_invariants().map_err(fail)?;
        if let Some(st) = &self.step {
            let live = self.sched.live() as u64;
            let expected: u64 = st.remaining.values().sum();
            if live != expected {
                return Err(fail(format!("trajectory conservation: {live} live, {expected} expected")));
            }
        }
        Ok(())
    }

    fn handle(&mut self, now: SimTime, ev: SimEvent) -> Result<(), SimError> {
        match ev {
            SimEvent::ServingArrival { index } => self.on_arrival(now, index)?,
            SimEvent::RolloutTurnReady { traj } => {
                self.sched.turn_ready(traj);
                self.dispatch(now)?;
            }
            SimEvent::TickPrefiller { gpu, generation }
            | SimEvent::TickDecoder { gpu, generation }
            | SimEvent::TickRollout { gpu, generation } => self.on_tick(now, gpu, generation)?,
            SimEvent::LeaseExpiry { gpu } => {
                let g = gpu as usize;
                if self.lease_armed[g].is_some_and(|a| a <= now) {
                    self.lease_armed[g] = None;
                }
                self.exec_mut(gpu).memory_mut().expire_leases(now);
                self.arm_lease(gpu)?;
            }
            SimEvent::Heartbeat { gpu } => {
                if self.execs[gpu as usize].is_alive() {
                    self.sched.on_heartbeat(gpu, now);
                }
                let lost = self.sched.detect_failures(now);
                for (failed, traj, outcome) in lost {
                    self.record_loss(now, failed, traj, outcome, false)?;
                }
                self.dispatch(now)?;
                self.queue.schedule(now + self.cfg.scheduler.heartbeat_period, SimEvent::Heartbeat { gpu })?;
            }
            SimEvent::WorkerFailure { gpu } => {
                let e = self.exec_mut(gpu);
                if e.is_alive() {
                    e.crash(now);
                    self.log.write(LogRecord::Failure { t: now, gpu })?;
                    let t = now + secs_f64(self.cfg.failures.mttr_s);
                    self.queue.schedule(t, SimEvent::WorkerRecovery { gpu })?;
                }
            }
            SimEvent::WorkerRecovery { gpu } => {
                self.exec_mut(gpu).recover(now);
                self.log.write(LogRecord::Recovery { t: now, gpu })?;
                let t = self.draw_exp(self.cfg.failures.mtbf_s);
                self.queue.schedule(t, SimEvent::WorkerFailure { gpu })?;
            }
            SimEvent::ActivationDone { .. } => self.dispatch(now)?,
            SimEvent::StepBoundary { step } => self.start_step(now, step)?,
            SimEvent::TransferComplete { .. } => {}
            SimEvent::DispatchRetry => {
                self.retry_armed = false;
                self.dispatch(now)?;
            }
        }
        Ok(())
    }

    fn wake(&mut self, gpu: GpuId, at: SimTime) -> Result<(), SimError> {
        if let Some((t, ev)) = self.exec_mut(gpu).wake(at) {
            self.queue.schedule(t, ev)?;
        }
        Ok(())
    }

    fn arm_lease(&mut self, gpu: GpuId) -> Result<(), SimError> {
        let g = gpu as usize;
        if let Some(t) = self.execs[g].memory().next_lease_expiry() {
            if self.lease_armed[g].is_none_or(|a| t < a) {
                let at = t.max(self.queue.now());
                self.lease_armed[g] = Some(at);
                self.queue.schedule(at, SimEvent::LeaseExpiry { gpu })?;
            }
        }
        Ok(())
    }

    fn least_backlog(&self, pool: &[GpuId]) -> Option<GpuId> {
        pool.iter().copied().min_by_key(|&g| (self.execs[g as usize].serving_backlog(), g))
    }

    fn on_arrival(&mut self, now: SimTime, index: usize) -> Result<(), SimError> {
        let r = self.trace[index];
        let req = ServingRequest::new(index as u64, r.t_arr, r.prompt_tokens, r.output_tokens);
        if let Some(g) = self.least_backlog(&self.prefillers) {
            self.exec_mut(g).enqueue_prefill(req);
            self.wake(g, now)?;
        }
        if let Some(next) = self.trace.get(index + 1) {
            if next.t_arr <= self.max_time {
                self.queue.schedule(next.t_arr.max(now), SimEvent::ServingArrival { index: index + 1 })?;
            }
        }
        Ok(())
    }

    fn on_tick(&mut self, now: SimTime, gpu: GpuId, generation: u64) -> Result<(), SimError> {
        if !self.exec_mut(gpu).accept_tick(generation) {
            return Ok(());
        }
        let res = self.exec_mut(gpu).tick(now);
        if self.cfg.sim.check_invariants {
            check_launch_list(&res.launches).map_err(|message| SimError::Invariant {
                at: now,
                event: format!("tick {gpu}"),
                message,
            })?;
        }
        let mut rollout_changed = false;
        for rep in res.reports {
            rollout_changed |= self.on_report(now, rep)?;
        }
        if let Some(t) = res.next_tick {
            self.wake(gpu, t)?;
        }
        self.arm_lease(gpu)?;
        if rollout_changed {
            self.dispatch(now)?;
        }
        Ok(())
    }

    /// Returns whether scheduler state changed.
    fn on_report(&mut self, now: SimTime, rep: ExecReport) -> Result<bool, SimError> {
        match rep {
            ExecReport::Handoff { req } => {
                let t_first = req.t_first.unwrap_or(now);
                if let Some(d) = self.least_backlog(&self.decoders) {
                    self.exec_mut(d).enqueue_decode(req);
                    self.wake(d, t_first)?;
                }
                Ok(false)
            }
            ExecReport::ServingDone { sample } => {
                self.log.write(LogRecord::Request {
                    id: sample.request_id,
                    t_arr: sample.t_arr,
                    ttft: sample.ttft,
                    gaps: sample.tpot.clone(),
                })?;
                Ok(false)
            }
            ExecReport::TurnComplete { gpu, traj, turn_index, attempt, at, cached_tokens, prefill_computed } => {
                let spec_turn = self
                    .sched
                    .trajectory(traj)
                    .and_then(|t| t.spec.turns.get(turn_index as usize).copied().map(|s| (s, t.num_turns())));
                match self.sched.on_turn_complete(gpu, traj, turn_index, attempt, at) {
                    TurnOutcome::Stale => Ok(false),
                    outcome => {
                        let (spec, n) = spec_turn.expect("current turn exists");
                        self.log.write(LogRecord::Turn {
                            step: self.step_of(traj),
                            t: at,
                            gpu,
                            traj,
                            turn: turn_index,
                            prompt: spec.prompt_tokens,
                            decode: spec.decode_tokens,
                            cached: cached_tokens,
                            computed: prefill_computed,
                            last: turn_index + 1 == n,
                        })?;
                        match outcome {
                            TurnOutcome::NextTurnAt(t) => {
                                self.queue.schedule(t.max(now), SimEvent::RolloutTurnReady { traj })?;
                            }
                            TurnOutcome::Done { group_id } => self.trajectory_resolved(now, group_id)?,
                            TurnOutcome::Stale => unreachable!(),
                        }
                        Ok(true)
                    }
                }
            }
            ExecReport::Stalled { gpu, traj, turn_index, attempt, .. } => {
                let outcome = self.sched.on_turn_lost(gpu, traj, turn_index, attempt, true);
                self.record_loss(now, gpu, traj, outcome, true)?;
                Ok(outcome != LossOutcome::Stale)
            }
            ExecReport::Aborted { gpu, traj, turn_index, attempt, .. } => {
                let outcome = self.sched.on_turn_lost(gpu, traj, turn_index, attempt, false);
                self.record_loss(now, gpu, traj, outcome, false)?;
                Ok(outcome != LossOutcome::Stale)
            }
        }
    }

    fn step_of(&self, traj: TrajId) -> u32 {
        self.traj_step.get(&traj).copied().unwrap_or(0)
    }

    fn record_loss(&mut self, now: SimTime, gpu: GpuId, traj: TrajId, outcome: LossOutcome, stalled: bool) -> Result<(), SimError> {
        if outcome == LossOutcome::Stale {
            return Ok(());
        }
        let turn = self.sched.trajectory(traj).map_or(0, |t| t.turn_index);
        let dropped = matches!(outcome, LossOutcome::Dropped { .. });
        self.log.write(LogRecord::Lost { step: self.step_of(traj), t: now, gpu, traj, turn, stalled, dropped })?;
        if let LossOutcome::Dropped { group_id } = outcome {
            self.trajectory_resolved(now, group_id)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, now: SimTime) -> Result<(), SimError> {
        if self.sched.queued() == 0 {
            return Ok(());
        }
        let probe = Probe { execs: &self.execs, min_rollout_step: self.min_rollout_step };
        let placed = self.sched.dispatch_ready(&probe, now);
        if self.cfg.sim.check_invariants {
            self.sched.check_work_conservation(&probe, now).map_err(|message| SimError::Invariant {
                at: now,
                event: "dispatch".into(),
                message,
            })?;
        }
        for (gpu, work) in placed {
            self.exec_mut(gpu).assign_turn(work, now);
            self.wake(gpu, now)?;
            self.arm_lease(gpu)?;
        }
        if self.sched.queued() > 0 && !self.retry_armed {
            self.retry_armed = true;
            self.queue.schedule(now + self.cfg.scheduler.retry_interval, SimEvent::DispatchRetry)?;
        }
        Ok(())
    }

    fn start_step(&mut self, now: SimTime, index: u32) -> Result<(), SimError> {
        for g in self.serving.clone() {
            let e = self.exec_mut(g);
            let peak = e.take_peak_serving();
            e.memory_mut().recompute_budget(peak);
        }
        let mut by_usage: Vec<(f64, GpuId)> =
            self.serving.iter().map(|&g| (self.execs[g as usize].recent_serving_usage(), g)).collect();
        by_usage.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let borrowed: Vec<GpuId> =
            by_usage.into_iter().take(self.cfg.cluster.borrow_cap as usize).map(|(_, g)| g).collect();
        let ready = now + secs_f64(self.cfg.cluster.activation_s);
        for &g in &borrowed {
            self.exec_mut(g).activate_rollout(ready);
            self.queue.schedule(ready, SimEvent::ActivationDone { gpu: g, step: index })?;
        }
        self.log.write(LogRecord::StepStart { step: index, t: now, borrowed: borrowed.clone() })?;
        let r = &self.cfg.rollout;
        let plan = StepPlan {
            step_index: index,
            mode: r.mode,
            b0: r.b0,
            g0: r.g0,
            success_prob: r.success_prob,
            max_groups: r.max_groups,
        };
        self.step = Some(StepState {
            index,
            start: now,
            sampler: GroupSampler::new(plan)?,
            remaining: BTreeMap::new(),
            wl_rng: self.streams.substream(RngStreams::WORKLOAD, index as u64),
            reward_rng: self.streams.substream(RngStreams::REWARD, index as u64),
        });
        self.launch_groups(now)?;
        self.dispatch(now)
    }

    fn launch_groups(&mut self, now: SimTime) -> Result<(), SimError> {
        let st = self.step.as_mut().expect("inside a step");
        let n = st.sampler.to_launch();
        if n == 0 {
            return Ok(());
        }
        let g0 = self.cfg.rollout.g0;
        let specs = generate_trajectories(&self.cfg.rollout.shape, n, g0, self.next_group, self.next_traj, &mut st.wl_rng)?;
        let index = st.index;
        for g in 0..n {
            let group = self.next_group + g;
            st.remaining.insert(group, g0);
            self.log.write(LogRecord::GroupLaunch { step: index, t: now, group, trajs: g0 })?;
        }
        self.next_group += n;
        self.next_traj += n * g0;
        for s in specs {
            self.traj_step.insert(s.id, index);
            self.sched.submit(s)?;
        }
        Ok(())
    }

    fn trajectory_resolved(&mut self, now: SimTime, group: u64) -> Result<(), SimError> {
        let st = self.step.as_mut().expect("inside a step");
        let left = st.remaining.get_mut(&group).expect("known group");
        *left -= 1;
        if *left > 0 {
            return Ok(());
        }
        st.remaining.remove(&group);
        let accepted = st.sampler.on_group_complete(&mut st.reward_rng);
        let index = st.index;
        self.log.write(LogRecord::GroupDone { step: index, t: now, group, accepted })?;
        self.launch_groups(now)?;
        if self.step.as_ref().expect("inside a step").sampler.is_done() {
            self.end_rollout(now)?;
        }
        Ok(())
    }

    fn end_rollout(&mut self, now: SimTime) -> Result<(), SimError> {
        let st = self.step.take().expect("inside a step");
        self.log.write(LogRecord::RolloutEnd { step: st.index, t: now })?;
        self.touched.fill(true);
        for e in &mut self.execs {
            let left = e.deactivate_rollout();
            debug_assert!(left.is_empty(), "rollout ended with work on gpu {}", e.gpu());
        }
        self.sched.clear_finished();
        self.traj_step.clear();
        let s = &self.cfg.step;
        let tl = StepTimeline {
            rollout: now - st.start,
            training: secs_f64(s.training_s),
            intra_sync: secs_f64(s.intra_sync_s),
            cross_sync: secs_f64(s.cross_sync_s),
            overlap_window: now - st.start,
        };
        let end = st.start + tl.step_time();
        self.log.write(LogRecord::StepEnd {
            step: st.index,
            t: end,
            training: tl.training,
            intra_sync: tl.intra_sync,
            exposed_sync: tl.exposed_sync(),
        })?;
        if st.index + 1 < self.cfg.sim.steps {
            if end <= self.max_time {
                self.queue.schedule(end, SimEvent::StepBoundary { step: st.index + 1 })?;
            }
        } else {
            self.finished_at = Some(end);
        }
        Ok(())
    }

    fn finish(mut self) -> Result<SimOutput, SimError> {
        let completed = self.finished_at.is_some();
        let end = self.finished_at.unwrap_or(self.max_time.max(self.queue.now()));
        if !completed {
            self.sched.abandon_all();
        }
        let mut tot = ExecStats::default();
        let mut cuts = 0;
        let mut gpus = Vec::new();
        for e in &self.execs {
            let s = e.stats();
            tot.soundness_violations += s.soundness_violations;
            tot.stalls += s.stalls;
            tot.prefix_hit_turns += s.prefix_hit_turns;
            cuts += e.memory().stats().cuts;
            gpus.push(GpuReport { gpu: e.gpu(), role: e.role(), exec: s, memory: e.memory().stats() });
        }
        self.log.write(LogRecord::RunEnd {
            t: end,
            events: self.queue.processed(),
            admission_violations: tot.soundness_violations,
            emergency_cuts: cuts,
            stalls: tot.stalls,
            prefix_hit_turns: tot.prefix_hit_turns,
        })?;
        let sched = self.sched.stats();
        let (digest, records) = self.log.finish()?;
        // metrics come from the same replay the verifier runs
        let replay = match &records {
            Some(r) => Replay::from_records(r)?,
            None => unreachable!("run() always retains records"),
        };
        Ok(SimOutput {
            summary: replay.summary(&digest),
            samples: replay.samples.clone(),
            steps: replay.steps.clone(),
            gpus,
            sched,
            log_digest: digest,
            records,
            completed,
            invariant_checks: self.invariant_checks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        let mut c = SimConfig::default();
        c.sim.steps = 2;
        c.sim.check_invariants = true;
        c.rollout.b0 = 4;
        c.rollout.g0 = 4;
        c.sim.max_time_s = 1200.0;
        c
    }

    #[test]
    fn smoke() {
        let out = run(&small(), "t", "v", EventLog::discard()).unwrap();
        eprintln!("{:#?}", out.summary);
        eprintln!("{:#?}", out.steps);
        eprintln!("{:#?}", out.sched);
        for g in &out.gpus {
            eprintln!("{:?} {:?}", g.role, g.exec);
        }
        assert!(out.completed);
    }
}
