//! Global rollout scheduler: places each turn on a dedicated or borrowed
//! serving GPU with cache affinity, enforces per-GPU concurrency caps and
//! reroutes turns lost to stalls, pressure aborts or failed workers.
//!
//! The scheduler never touches executor state. Everything it knows about a
//! worker arrives as a [`WorkerView`] from a [`ClusterProbe`] or as a report.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::executor::TurnWork;
use crate::kernel::{GpuId, TrajId};
use crate::time::{Micros, SimTime};
use crate::workload::TrajectorySpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkerKind {
    Dedicated,
    Serving,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajStatus {
    /// Ready for its next turn, not yet examined.
    Pending,
    Running(GpuId),
    WaitingEnv,
    /// Examined and found no capacity.
    Queued,
    Done,
    Dropped,
}

impl TrajStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TrajStatus::Done | TrajStatus::Dropped)
    }
}

#[derive(Debug, Clone)]
pub struct RolloutTrajectory {
    pub spec: TrajectorySpec,
    pub turn_index: u32,
    pub last_worker: Option<GpuId>,
    pub status: TrajStatus,
    /// Bumped on every placement; reports for older attempts are stale.
    pub attempt: u32,
    pub reroutes: u32,
    pub turns_completed: u32,
    /// Worker holding this trajectory's slot for its whole life (pinned mode).
    pub pinned: Option<GpuId>,
    /// Worker to avoid and its beat count when the turn was lost there.
    exclude: Option<(GpuId, u64)>,
}

impl RolloutTrajectory {
    fn new(spec: TrajectorySpec) -> Self {
        Self {
            spec,
            turn_index: 0,
            last_worker: None,
            status: TrajStatus::Pending,
            attempt: 0,
            reroutes: 0,
            turns_completed: 0,
            pinned: None,
            exclude: None,
        }
    }

    pub fn id(&self) -> TrajId {
        self.spec.id
    }

    pub fn num_turns(&self) -> u32 {
        self.spec.turns.len() as u32
    }

    pub fn current_work(&self) -> TurnWork {
        let i = self.turn_index as usize;
        let t = &self.spec.turns[i];
        TurnWork {
            traj: self.spec.id,
            turn_index: self.turn_index,
            attempt: self.attempt,
            context_before: self.spec.context_before(i),
            prompt_tokens: t.prompt_tokens,
            decode_tokens: t.decode_tokens,
            final_turn: i + 1 == self.spec.turns.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeartbeatState {
    pub worker_id: GpuId,
    pub last_beat: SimTime,
    pub healthy: bool,
    pub beat_period: Micros,
}

impl HeartbeatState {
    pub fn expected_healthy(&self, now: SimTime, k: u32) -> bool {
        now.saturating_sub(self.last_beat) <= k as u64 * self.beat_period
    }
}

/// What the scheduler learns about one worker for one candidate turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerView {
    pub alive: bool,
    pub rollout_ready: bool,
    /// The turn's KV needs fit the worker's rollout budget.
    pub fits: bool,
    /// Serving slack covers at least one single-sequence rollout decode step.
    pub slack_ok: bool,
    pub rollout_pages: u32,
}

pub trait ClusterProbe {
    fn view(&self, gpu: GpuId, work: &TurnWork, now: SimTime) -> WorkerView;
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SchedConfig {
    pub concurrency_cap: u32,
    pub serving_concurrency_cap: u32,
    pub heartbeat_period: Micros,
    pub heartbeat_k: u32,
    /// Dispatch per turn; `false` pins a trajectory to one worker for life.
    pub turn_wise: bool,
    pub affinity: bool,
    pub max_reroutes: u32,
    pub retry_interval: Micros,
}

impl Default for SchedConfig {
    fn default() -> Self {
        Self {
            concurrency_cap: 16,
            serving_concurrency_cap: 8,
            heartbeat_period: 1_000_000,
            heartbeat_k: 3,
            turn_wise: true,
            affinity: true,
            max_reroutes: 8,
            retry_interval: 50_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Worker(GpuId),
    Queued,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TurnOutcome {
    /// Next turn becomes ready after the environment delay.
    NextTurnAt(SimTime),
    Done { group_id: u64 },
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossOutcome {
    Rerouted,
    Dropped { group_id: u64 },
    Stale,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedStats {
    pub dispatched: u64,
    pub affinity_placements: u64,
    pub serving_placements: u64,
    pub queued_decisions: u64,
    pub reroutes: u64,
    pub dropped: u64,
    pub done: u64,
    pub stale_reports: u64,
    pub failures_detected: u64,
}

#[derive(Debug, Clone)]
struct WorkerEntry {
    kind: WorkerKind,
    hb: HeartbeatState,
    /// Set by a stall report; cleared by the next beat.
    suspect: bool,
    beats: u64,
    holders: BTreeSet<TrajId>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SchedError {
    #[error("worker {0} registered twice")]
    DuplicateWorker(GpuId),
    #[error("trajectory {0} submitted twice")]
    DuplicateTrajectory(TrajId),
    #[error("trajectory {0} has no turns")]
    EmptyTrajectory(TrajId),
}

pub struct Scheduler {
    cfg: SchedConfig,
    workers: BTreeMap<GpuId, WorkerEntry>,
    trajs: BTreeMap<TrajId, RolloutTrajectory>,
    ready: VecDeque<TrajId>,
    stats: SchedStats,
}

impl Scheduler {
    pub fn new(cfg: SchedConfig) -> Self {
        Self {
            cfg,
            workers: BTreeMap::new(),
            trajs: BTreeMap::new(),
            ready: VecDeque::new(),
            stats: SchedStats::default(),
        }
    }

    pub fn config(&self) -> &SchedConfig {
        &self.cfg
    }

    pub fn stats(&self) -> SchedStats {
        self.stats
    }

    pub fn add_worker(&mut self, gpu: GpuId, kind: WorkerKind, now: SimTime) -> Result<(), SchedError> {
        if self.workers.contains_key(&gpu) {
            return Err(SchedError::DuplicateWorker(gpu));
        }
        let hb = HeartbeatState { worker_id: gpu, last_beat: now, healthy: true, beat_period: self.cfg.heartbeat_period };
        self.workers.insert(gpu, WorkerEntry { kind, hb, suspect: false, beats: 0, holders: BTreeSet::new() });
        Ok(())
    }

    pub fn heartbeat_state(&self, gpu: GpuId) -> Option<HeartbeatState> {
        self.workers.get(&gpu).map(|w| w.hb)
    }

    pub fn worker_kind(&self, gpu: GpuId) -> Option<WorkerKind> {
        self.workers.get(&gpu).map(|w| w.kind)
    }

    pub fn slots_used(&self, gpu: GpuId) -> usize {
        self.workers.get(&gpu).map_or(0, |w| w.holders.len())
    }

    pub fn trajectory(&self, id: TrajId) -> Option<&RolloutTrajectory> {
        self.trajs.get(&id)
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &RolloutTrajectory> {
        self.trajs.values()
    }

    pub fn queued(&self) -> usize {
        self.ready.len()
    }

    /// Trajectories not yet Done or Dropped.
    pub fn live(&self) -> usize {
        self.trajs.values().filter(|t| !t.status.is_terminal()).count()
    }

    /// Forgets finished trajectories; call between steps.
    pub fn clear_finished(&mut self) {
        self.trajs.retain(|_, t| !t.status.is_terminal());
    }

    pub fn submit(&mut self, spec: TrajectorySpec) -> Result<(), SchedError> {
        let id = spec.id;
        if spec.turns.is_empty() {
            return Err(SchedError::EmptyTrajectory(id));
        }
        if self.trajs.contains_key(&id) {
            return Err(SchedError::DuplicateTrajectory(id));
        }
        self.trajs.insert(id, RolloutTrajectory::new(spec));
        self.ready.push_back(id);
        Ok(())
    }

    /// Environment delay over; the next turn waits for placement.
    pub fn turn_ready(&mut self, traj: TrajId) {
        if let Some(t) = self.trajs.get_mut(&traj) {
            if t.status == TrajStatus::WaitingEnv {
                t.status = TrajStatus::Pending;
                self.ready.push_back(traj);
            }
        }
    }

    fn cap_of(&self, kind: WorkerKind) -> usize {
        match kind {
            WorkerKind::Dedicated => self.cfg.concurrency_cap as usize,
            WorkerKind::Serving => self.cfg.serving_concurrency_cap as usize,
        }
    }

    fn usable(&self, gpu: GpuId, w: &WorkerEntry, v: &WorkerView, exclude: Option<(GpuId, u64)>) -> bool {
        // the exclusion lapses once the worker beats again
        exclude != Some((gpu, w.beats)) && w.hb.healthy && !w.suspect && v.alive && v.rollout_ready
    }

    /// Whether `gpu` could take a new turn ignoring the turn-specific fit.
    fn has_capacity(&self, gpu: GpuId, w: &WorkerEntry, v: &WorkerView, exclude: Option<(GpuId, u64)>) -> bool {
        self.usable(gpu, w, v, exclude)
            && w.holders.len() < self.cap_of(w.kind)
            && (w.kind == WorkerKind::Dedicated || v.slack_ok)
    }

    fn eligible(&self, gpu: GpuId, w: &WorkerEntry, v: &WorkerView, exclude: Option<(GpuId, u64)>) -> bool {
        self.has_capacity(gpu, w, v, exclude) && v.fits
    }

    /// Cascade: cache-affine worker, least-loaded dedicated GPU, least-loaded
    /// eligible serving GPU, else queue.
    pub fn choose(&self, traj: &RolloutTrajectory, probe: &dyn ClusterProbe, now: SimTime) -> Placement {
        let work = traj.current_work();
        let exclude = traj.exclude;
        if let Some(p) = traj.pinned {
            let w = &self.workers[&p];
            let v = probe.view(p, &work, now);
            if self.usable(p, w, &v, exclude) {
                return Placement::Worker(p);
            }
        }
        let views: Vec<(GpuId, &WorkerEntry, WorkerView)> =
            self.workers.iter().map(|(&g, w)| (g, w, probe.view(g, &work, now))).collect();
        if self.cfg.affinity {
            if let Some(last) = traj.last_worker {
                if let Some((g, w, v)) = views.iter().find(|(g, _, _)| *g == last) {
                    if self.eligible(*g, w, v, exclude) {
                        return Placement::Worker(last);
                    }
                }
            }
        }
        let best = |kind: WorkerKind, load: &dyn Fn(&WorkerEntry, &WorkerView) -> u64| {
            views
                .iter()
                .filter(|(g, w, v)| w.kind == kind && self.eligible(*g, w, v, exclude))
                .min_by_key(|(g, w, v)| (load(w, v), *g))
                .map(|(g, _, _)| *g)
        };
        if let Some(g) = best(WorkerKind::Dedicated, &|w, _| w.holders.len() as u64) {
            return Placement::Worker(g);
        }
        if let Some(g) = best(WorkerKind::Serving, &|_, v| v.rollout_pages as u64) {
            return Placement::Worker(g);
        }
        Placement::Queued
    }

    /// No worker can take any turn right now.
    fn saturated(&self, probe: &dyn ClusterProbe, sample: &TurnWork, now: SimTime) -> bool {
        !self
            .workers
            .iter()
            .any(|(&g, w)| self.has_capacity(g, w, &probe.view(g, sample, now), None))
    }

    /// Tries every ready trajectory in FIFO order; returns the placements
    /// made. Unplaced trajectories stay Queued.
    pub fn dispatch_ready(&mut self, probe: &dyn ClusterProbe, now: SimTime) -> Vec<(GpuId, TurnWork)> {
        let mut placed = Vec::new();
        let mut keep = VecDeque::new();
        let mut saturated = false;
        while let Some(id) = self.ready.pop_front() {
            let Some(t) = self.trajs.get(&id) else { continue };
            if !matches!(t.status, TrajStatus::Pending | TrajStatus::Queued) {
                continue;
            }
            // a pinned trajectory already holds its slot
            let placement = if saturated && t.pinned.is_none() {
                Placement::Queued
            } else {
                self.choose(t, probe, now)
            };
            match placement {
                Placement::Worker(g) => placed.push((g, self.place(id, g))),
                Placement::Queued => {
                    self.stats.queued_decisions += 1;
                    if !saturated && t.pinned.is_none() {
                        saturated = self.saturated(probe, &t.current_work(), now);
                    }
                    self.trajs.get_mut(&id).expect("present").status = TrajStatus::Queued;
                    keep.push_back(id);
                }
            }
        }
        self.ready = keep;
        placed
    }

    fn place(&mut self, id: TrajId, gpu: GpuId) -> TurnWork {
        let pinned_mode = !self.cfg.turn_wise;
        let t = self.trajs.get_mut(&id).expect("present");
        let moved_from = t.pinned.filter(|&p| p != gpu);
        let affine = t.last_worker == Some(gpu);
        t.attempt += 1;
        t.status = TrajStatus::Running(gpu);
        t.exclude = None;
        if pinned_mode {
            t.pinned = Some(gpu);
        }
        let work = t.current_work();
        if let Some(old) = moved_from {
            self.release_slot(id, old);
        }
        let w = self.workers.get_mut(&gpu).expect("known worker");
        w.holders.insert(id);
        self.stats.dispatched += 1;
        if affine {
            self.stats.affinity_placements += 1;
        }
        if w.kind == WorkerKind::Serving {
            self.stats.serving_placements += 1;
        }
        work
    }

    fn release_slot(&mut self, id: TrajId, gpu: GpuId) {
        if let Some(w) = self.workers.get_mut(&gpu) {
            w.holders.remove(&id);
        }
    }

    fn is_current(&self, gpu: GpuId, traj: TrajId, turn_index: u32, attempt: u32) -> bool {
        self.trajs.get(&traj).is_some_and(|t| {
            t.status == TrajStatus::Running(gpu) && t.turn_index == turn_index && t.attempt == attempt
        })
    }

    pub fn on_turn_complete(&mut self, gpu: GpuId, traj: TrajId, turn_index: u32, attempt: u32, now: SimTime) -> TurnOutcome {
        if !self.is_current(gpu, traj, turn_index, attempt) {
            self.stats.stale_reports += 1;
            return TurnOutcome::Stale;
        }
        let turn_wise = self.cfg.turn_wise;
        let t = self.trajs.get_mut(&traj).expect("present");
        t.turns_completed += 1;
        t.turn_index += 1;
        t.last_worker = Some(gpu);
        let outcome = if t.turn_index == t.num_turns() {
            t.status = TrajStatus::Done;
            t.pinned = None;
            TurnOutcome::Done { group_id: t.spec.group_id }
        } else {
            t.status = TrajStatus::WaitingEnv;
            TurnOutcome::NextTurnAt(now + t.spec.turns[t.turn_index as usize].env_delay)
        };
        let release = turn_wise || matches!(outcome, TurnOutcome::Done { .. });
        if release {
            self.release_slot(traj, gpu);
        }
        if matches!(outcome, TurnOutcome::Done { .. }) {
            self.stats.done += 1;
        }
        outcome
    }

    /// A stall or abort report. The turn restarts elsewhere; a stall also
    /// marks the worker suspect until its next heartbeat.
    pub fn on_turn_lost(&mut self, gpu: GpuId, traj: TrajId, turn_index: u32, attempt: u32, stalled: bool) -> LossOutcome {
        if !self.is_current(gpu, traj, turn_index, attempt) {
            self.stats.stale_reports += 1;
            return LossOutcome::Stale;
        }
        if stalled {
            if let Some(w) = self.workers.get_mut(&gpu) {
                w.suspect = true;
            }
        }
        self.lose(traj, gpu)
    }

    fn lose(&mut self, traj: TrajId, gpu: GpuId) -> LossOutcome {
        self.release_slot(traj, gpu);
        let max = self.cfg.max_reroutes;
        let t = self.trajs.get_mut(&traj).expect("present");
        t.pinned = None;
        t.reroutes += 1;
        if t.reroutes > max {
            t.status = TrajStatus::Dropped;
            self.stats.dropped += 1;
            return LossOutcome::Dropped { group_id: t.spec.group_id };
        }
        t.status = TrajStatus::Pending;
        t.exclude = Some((gpu, self.workers.get(&gpu).map_or(0, |w| w.beats)));
        self.ready.push_back(traj);
        self.stats.reroutes += 1;
        LossOutcome::Rerouted
    }

    pub fn on_heartbeat(&mut self, gpu: GpuId, now: SimTime) {
        if let Some(w) = self.workers.get_mut(&gpu) {
            w.hb.last_beat = now;
            w.hb.healthy = true;
            w.suspect = false;
            w.beats += 1;
        }
    }

    /// Marks workers whose beats stopped as unhealthy and reroutes the turns
    /// running there. Returns `(worker, trajectory, outcome)` per affected turn.
    pub fn detect_failures(&mut self, now: SimTime) -> Vec<(GpuId, TrajId, LossOutcome)> {
        let k = self.cfg.heartbeat_k;
        let failed: Vec<GpuId> = self
            .workers
            .iter()
            .filter(|(_, w)| w.hb.healthy && !w.hb.expected_healthy(now, k))
            .map(|(&g, _)| g)
            .collect();
        let mut out = Vec::new();
        for g in failed {
            self.stats.failures_detected += 1;
            let w = self.workers.get_mut(&g).expect("known");
            w.hb.healthy = false;
            let holders: Vec<TrajId> = w.holders.iter().copied().collect();
            for id in holders {
                let t = &self.trajs[&id];
                if t.status == TrajStatus::Running(g) {
                    out.push((g, id, self.lose(id, g)));
                } else {
                    // pinned but between turns: free the slot, keep the turn
                    self.release_slot(id, g);
                    self.trajs.get_mut(&id).expect("present").pinned = None;
                }
            }
        }
        out
    }

    /// Drops every live trajectory (end of a truncated run).
    pub fn abandon_all(&mut self) -> Vec<TrajId> {
        let ids: Vec<TrajId> = self.trajs.iter().filter(|(_, t)| !t.status.is_terminal()).map(|(&i, _)| i).collect();
        for &id in &ids {
            let t = self.trajs.get_mut(&id).expect("present");
            t.status = TrajStatus::Dropped;
            t.pinned = None;
            self.stats.dropped += 1;
        }
        for w in self.workers.values_mut() {
            w.holders.clear();
        }
        self.ready.clear();
        ids
    }

    /// Work conservation at this instant: no queued trajectory has an
    /// eligible worker.
    pub fn check_work_conservation(&self, probe: &dyn ClusterProbe, now: SimTime) -> Result<(), String> {
        for id in &self.ready {
            let t = &self.trajs[id];
            if t.status != TrajStatus::Queued || t.pinned.is_some() {
                continue;
            }
            if let Placement::Worker(g) = self.choose(t, probe, now) {
                return Err(format!("trajectory {id} queued while worker {g} is eligible"));
            }
        }
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let ready: BTreeSet<TrajId> = self.ready.iter().copied().collect();
        if ready.len() != self.ready.len() {
            return Err("trajectory queued twice".into());
        }
        for (&g, w) in &self.workers {
            if w.holders.len() > self.cap_of(w.kind) {
                return Err(format!("worker {g} holds {} > cap", w.holders.len()));
            }
            for id in &w.holders {
                let t = self.trajs.get(id).ok_or_else(|| format!("worker {g} holds unknown {id}"))?;
                let ok = t.status == TrajStatus::Running(g) || t.pinned == Some(g);
                if !ok {
                    return Err(format!("worker {g} holds {id} in status {:?}", t.status));
                }
            }
        }
        for (&id, t) in &self.trajs {
            if let TrajStatus::Running(g) = t.status {
                let held = self.workers.get(&g).is_some_and(|w| w.holders.contains(&id));
                if !held {
                    return Err(format!("{id} running on {g} without a slot"));
                }
                let elsewhere = self.workers.iter().filter(|(&o, w)| o != g && w.holders.contains(&id)).count();
                if elsewhere > 0 {
                    return Err(format!("{id} holds slots on several workers"));
                }
            }
            if t.turns_completed != t.turn_index {
                return Err(format!("{id}: {} completions for turn index {}", t.turns_completed, t.turn_index));
            }
            if t.status == TrajStatus::Done && t.turn_index != t.num_turns() {
                return Err(format!("{id} done after {} of {} turns", t.turn_index, t.num_turns()));
            }
            let in_ready = matches!(t.status, TrajStatus::Pending | TrajStatus::Queued);
            if in_ready != ready.contains(&id) {
                return Err(format!("{id} status {:?} disagrees with the ready queue", t.status));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::TurnSpec;
    use proptest::prelude::*;
    use std::cell::RefCell;
    use std::collections::HashMap;

    #[derive(Default)]
    struct FakeProbe {
        views: RefCell<HashMap<GpuId, WorkerView>>,
    }

    fn ok_view() -> WorkerView {
        WorkerView { alive: true, rollout_ready: true, fits: true, slack_ok: true, rollout_pages: 0 }
    }

    impl FakeProbe {
        fn set(&self, g: GpuId, v: WorkerView) {
            self.views.borrow_mut().insert(g, v);
        }
    }

    impl ClusterProbe for FakeProbe {
        fn view(&self, gpu: GpuId, _: &TurnWork, _: SimTime) -> WorkerView {
            self.views.borrow().get(&gpu).copied().unwrap_or_else(ok_view)
        }
    }

    fn spec(id: TrajId, turns: usize) -> TrajectorySpec {
        TrajectorySpec {
            id,
            group_id: id / 4,
            turns: (0..turns)
                .map(|i| TurnSpec { env_delay: if i == 0 { 0 } else { 1_000_000 }, prompt_tokens: 100, decode_tokens: 10 })
                .collect(),
        }
    }

    fn sched(cfg: SchedConfig, dedicated: u32, serving: u32) -> Scheduler {
        let mut s = Scheduler::new(cfg);
        for g in 0..dedicated {
            s.add_worker(g, WorkerKind::Dedicated, 0).unwrap();
        }
        for g in 0..serving {
            s.add_worker(100 + g, WorkerKind::Serving, 0).unwrap();
        }
        s
    }

    #[test]
    fn affinity_keeps_worker() {
        let mut s = sched(SchedConfig::default(), 2, 0);
        let p = FakeProbe::default();
        s.submit(spec(0, 2)).unwrap();
        s.submit(spec(1, 2)).unwrap();
        let placed = s.dispatch_ready(&p, 0);
        assert_eq!(placed.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
        // traj 1 finishes first; worker 0 is then the least loaded, but
        // affinity sends traj 1 back to worker 1
        assert!(matches!(s.on_turn_complete(1, 1, 0, 1, 10), TurnOutcome::NextTurnAt(_)));
        s.turn_ready(1);
        let placed = s.dispatch_ready(&p, 20);
        assert_eq!(placed[0].0, 1);
        assert_eq!(s.stats().affinity_placements, 1);
        s.check_invariants().unwrap();
    }

    #[test]
    fn overflow_to_serving_gpu() {
        let cfg = SchedConfig { concurrency_cap: 2, ..Default::default() };
        let mut s = sched(cfg, 1, 2);
        let p = FakeProbe::default();
        p.set(100, WorkerView { rollout_pages: 50, ..ok_view() });
        for i in 0..3 {
            s.submit(spec(i, 1)).unwrap();
        }
        let placed: Vec<GpuId> = s.dispatch_ready(&p, 0).into_iter().map(|x| x.0).collect();
        // the third goes to the least-loaded serving GPU
        assert_eq!(placed, vec![0, 0, 101]);
        s.check_invariants().unwrap();
    }

    #[test]
    fn saturated_queues_then_redispatches() {
        let cfg = SchedConfig { concurrency_cap: 1, ..Default::default() };
        let mut s = sched(cfg, 1, 1);
        let p = FakeProbe::default();
        p.set(100, WorkerView { slack_ok: false, ..ok_view() });
        s.submit(spec(0, 1)).unwrap();
        s.submit(spec(1, 1)).unwrap();
        assert_eq!(s.dispatch_ready(&p, 0).len(), 1);
        assert_eq!(s.trajectory(1).unwrap().status, TrajStatus::Queued);
        s.check_work_conservation(&p, 0).unwrap();
        assert_eq!(s.on_turn_complete(0, 0, 0, 1, 5), TurnOutcome::Done { group_id: 0 });
        let placed = s.dispatch_ready(&p, 5);
        assert_eq!(placed.len(), 1);
        assert_eq!(placed[0].0, 0);
        s.check_invariants().unwrap();
    }

    #[test]
    fn stall_reroutes_away_from_reporter() {
        let mut s = sched(SchedConfig::default(), 2, 0);
        let p = FakeProbe::default();
        for i in 0..3 {
            s.submit(spec(i, 2)).unwrap();
        }
        s.dispatch_ready(&p, 0);
        let on0: Vec<TrajId> = s.trajectories().filter(|t| t.status == TrajStatus::Running(0)).map(|t| t.id()).collect();
        assert_eq!(on0.len(), 2);
        for &id in &on0 {
            assert_eq!(s.on_turn_lost(0, id, 0, 1, true), LossOutcome::Rerouted);
        }
        let placed = s.dispatch_ready(&p, 10);
        assert_eq!(placed.len(), 2);
        assert!(placed.iter().all(|(g, w)| *g == 1 && w.attempt == 2));
        // a late report for the old attempt is ignored
        assert_eq!(s.on_turn_complete(0, on0[0], 0, 1, 11), TurnOutcome::Stale);
        s.check_invariants().unwrap();
    }

    #[test]
    fn suspect_until_next_beat() {
        let mut s = sched(SchedConfig::default(), 1, 0);
        let p = FakeProbe::default();
        s.submit(spec(0, 1)).unwrap();
        s.dispatch_ready(&p, 0);
        s.on_turn_lost(0, 0, 0, 1, true);
        assert!(s.dispatch_ready(&p, 1).is_empty());
        s.on_heartbeat(0, 2);
        assert_eq!(s.dispatch_ready(&p, 2).len(), 1);
    }

    #[test]
    fn heartbeat_timeout_reroutes_running() {
        let mut s = sched(SchedConfig::default(), 2, 0);
        let p = FakeProbe::default();
        s.submit(spec(0, 1)).unwrap();
        s.dispatch_ready(&p, 0);
        for t in 1..=3 {
            s.on_heartbeat(1, t * 1_000_000);
            assert!(s.detect_failures(t * 1_000_000).is_empty());
        }
        s.on_heartbeat(1, 4_000_000);
        let lost = s.detect_failures(4_000_001);
        assert_eq!(lost, vec![(0, 0, LossOutcome::Rerouted)]);
        let hb = s.heartbeat_state(0).unwrap();
        assert!(!hb.healthy && !hb.expected_healthy(4_000_001, 3));
        assert_eq!(s.dispatch_ready(&p, 4_000_001)[0].0, 1);
        s.check_invariants().unwrap();
    }

    #[test]
    fn reroute_limit_drops() {
        let cfg = SchedConfig { max_reroutes: 1, ..Default::default() };
        let mut s = sched(cfg, 2, 0);
        let p = FakeProbe::default();
        s.submit(spec(0, 1)).unwrap();
        let (g, w) = s.dispatch_ready(&p, 0).remove(0);
        assert_eq!(s.on_turn_lost(g, 0, 0, w.attempt, false), LossOutcome::Rerouted);
        let (g, w) = s.dispatch_ready(&p, 0).remove(0);
        assert_eq!(s.on_turn_lost(g, 0, 0, w.attempt, false), LossOutcome::Dropped { group_id: 0 });
        assert_eq!(s.live(), 0);
    }

    #[test]
    fn pinned_mode_holds_slot_through_env_wait() {
        let cfg = SchedConfig { turn_wise: false, concurrency_cap: 1, ..Default::default() };
        let mut s = sched(cfg, 1, 0);
        let p = FakeProbe::default();
        s.submit(spec(0, 2)).unwrap();
        s.submit(spec(1, 1)).unwrap();
        assert_eq!(s.dispatch_ready(&p, 0).len(), 1);
        s.on_turn_complete(0, 0, 0, 1, 5);
        // slot still held while waiting on the environment
        assert!(s.dispatch_ready(&p, 6).is_empty());
        s.turn_ready(0);
        let placed = s.dispatch_ready(&p, 7);
        assert_eq!(placed.len(), 1);
        assert_eq!(placed[0].1.traj, 0);
        s.check_invariants().unwrap();
    }

    #[test]
    fn rollout_not_ready_blocks_serving() {
        let mut s = sched(SchedConfig::default(), 0, 1);
        let p = FakeProbe::default();
        p.set(100, WorkerView { rollout_ready: false, ..ok_view() });
        s.submit(spec(0, 1)).unwrap();
        assert!(s.dispatch_ready(&p, 0).is_empty());
        p.set(100, ok_view());
        assert_eq!(s.dispatch_ready(&p, 1).len(), 1);
    }

    #[test]
    fn work_items_carry_history() {
        let mut s = sched(SchedConfig::default(), 1, 0);
        let p = FakeProbe::default();
        s.submit(spec(0, 3)).unwrap();
        s.dispatch_ready(&p, 0);
        s.on_turn_complete(0, 0, 0, 1, 1);
        s.turn_ready(0);
        let (_, w) = s.dispatch_ready(&p, 2).remove(0);
        assert_eq!((w.turn_index, w.context_before, w.final_turn), (1, 110, false));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Dispatch,
        Complete(usize),
        Lose(usize, bool),
        Ready(usize),
        Beat(u32),
        Detect,
        Toggle(u32),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            3 => Just(Op::Dispatch),
            4 => (0usize..40).prop_map(Op::Complete),
            1 => (0usize..40, any::<bool>()).prop_map(|(i, b)| Op::Lose(i, b)),
            3 => (0usize..40).prop_map(Op::Ready),
            2 => (0u32..4).prop_map(Op::Beat),
            1 => Just(Op::Detect),
            1 => (0u32..4).prop_map(Op::Toggle),
        ]
    }

    proptest! {
        #[test]
        fn invariants_hold_under_random_events(ops in prop::collection::vec(op(), 1..300), turn_wise in any::<bool>()) {
            let cfg = SchedConfig { concurrency_cap: 3, serving_concurrency_cap: 2, turn_wise, max_reroutes: 3, ..Default::default() };
            let mut s = sched(cfg, 2, 2);
            let p = FakeProbe::default();
            for i in 0..12 {
                s.submit(spec(i, 1 + (i as usize % 4))).unwrap();
            }
            let mut now = 0;
            for o in ops {
                now += 100_000;
                match o {
                    Op::Dispatch => { s.dispatch_ready(&p, now); s.check_work_conservation(&p, now).map_err(TestCaseError::fail)?; }
                    Op::Complete(i) => {
                        let running: Vec<_> = s.trajectories().filter_map(|t| match t.status { TrajStatus::Running(g) => Some((g, t.id(), t.turn_index, t.attempt)), _ => None }).collect();
                        if let Some(&(g, id, ti, a)) = running.get(i % running.len().max(1)) {
                            s.on_turn_complete(g, id, ti, a, now);
                        }
                    }
                    Op::Lose(i, stalled) => {
                        let running: Vec<_> = s.trajectories().filter_map(|t| match t.status { TrajStatus::Running(g) => Some((g, t.id(), t.turn_index, t.attempt)), _ => None }).collect();
                        if let Some(&(g, id, ti, a)) = running.get(i % running.len().max(1)) {
                            s.on_turn_lost(g, id, ti, a, stalled);
                            // duplicate delivery must be a no-op
                            prop_assert_eq!(s.on_turn_lost(g, id, ti, a, stalled), LossOutcome::Stale);
                        }
                    }
                    Op::Ready(i) => {
                        let waiting: Vec<_> = s.trajectories().filter(|t| t.status == TrajStatus::WaitingEnv).map(|t| t.id()).collect();
                        if let Some(&id) = waiting.get(i % waiting.len().max(1)) { s.turn_ready(id); }
                    }
                    Op::Beat(g) => { let g = if g < 2 { g } else { 98 + g }; s.on_heartbeat(g, now); }
                    Op::Detect => { s.detect_failures(now); }
                    Op::Toggle(g) => {
                        let g = 100 + g % 2;
                        let cur = p.views.borrow().get(&g).copied().unwrap_or_else(ok_view);
                        p.set(g, WorkerView { slack_ok: !cur.slack_ok, ..cur });
                    }
                }
                s.check_invariants().map_err(TestCaseError::fail)?;
            }
            // conservation of trajectory ids
            prop_assert_eq!(s.trajectories().count(), 12);
        }
    }
}
