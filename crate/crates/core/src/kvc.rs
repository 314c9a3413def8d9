//! Per-GPU KV-cache memory: a shared physical page pool, one virtual KV
//! space per resident model, a leased rollout prefix cache, and the
//! burst-trigger / emergency-cut / freeze budget policy.
//!
//! Page ownership is the single source of truth. Every physical page is
//! `Free`, `Serving` or `Rollout`, and a rollout page belongs either to an
//! in-flight rollout request or to exactly one prefix entry.

use std::collections::{BTreeMap, BTreeSet};

use crate::kernel::TrajId;
use crate::time::{Micros, SimTime};

pub type PageId = u32;
pub type PrefixKey = u64;
pub type ServingReqId = u64;

pub const DEFAULT_PAGE_SIZE: u64 = 2 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelRole {
    Serving,
    Rollout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageOwner {
    Free,
    Serving,
    Rollout,
}

impl From<ModelRole> for PageOwner {
    fn from(r: ModelRole) -> Self {
        match r {
            ModelRole::Serving => PageOwner::Serving,
            ModelRole::Rollout => PageOwner::Rollout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KvcError {
    #[error("requested {requested} pages but only {free} are free")]
    OutOfPages { requested: u32, free: u32 },
    #[error("{role:?} space holds {mapped}/{capacity} pages, cannot map {requested} more")]
    SpaceFull { role: ModelRole, requested: u32, mapped: u32, capacity: u32 },
    #[error("page {page} is not mapped in the {role:?} space")]
    NotMapped { page: PageId, role: ModelRole },
    #[error("no in-flight rollout KV for trajectory {0}")]
    UnknownTrajectory(TrajId),
    #[error("pages owned by {0:?} cannot back a prefix entry")]
    NotRolloutPages(ModelRole),
}

/// Physical pages shared by every model on one GPU.
#[derive(Debug, Clone)]
pub struct PhysicalPagePool {
    page_size: u64,
    owner: Vec<PageOwner>,
    free: Vec<PageId>,
    serving: u32,
    rollout: u32,
}

impl PhysicalPagePool {
    pub fn new(total_pages: u32, page_size: u64) -> Self {
        Self {
            page_size,
            owner: vec![PageOwner::Free; total_pages as usize],
            // popped from the back, so low ids are handed out first
            free: (0..total_pages).rev().collect(),
            serving: 0,
            rollout: 0,
        }
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    pub fn total_pages(&self) -> u32 {
        self.owner.len() as u32
    }

    pub fn free_pages(&self) -> u32 {
        self.free.len() as u32
    }

    pub fn owned_by(&self, role: ModelRole) -> u32 {
        match role {
            ModelRole::Serving => self.serving,
            ModelRole::Rollout => self.rollout,
        }
    }

    pub fn owner(&self, page: PageId) -> PageOwner {
        self.owner[page as usize]
    }

    fn counter(&mut self, role: ModelRole) -> &mut u32 {
        match role {
            ModelRole::Serving => &mut self.serving,
            ModelRole::Rollout => &mut self.rollout,
        }
    }

    /// Maps `n` free pages into `space`.
    pub fn map(&mut self, space: &mut VirtualKvSpace, n: u32) -> Result<Vec<PageId>, KvcError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        if space.mapped_len() + n > space.capacity_pages {
            return Err(KvcError::SpaceFull {
                role: space.role,
                requested: n,
                mapped: space.mapped_len(),
                capacity: space.capacity_pages,
            });
        }
        if n > self.free_pages() {
            return Err(KvcError::OutOfPages {
                requested: n,
                free: self.free_pages(),
            });
        }
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let page = self.free.pop().expect("checked above");
            self.owner[page as usize] = space.role.into();
            space.bind(page);
            out.push(page);
        }
        *self.counter(space.role) += n;
        Ok(out)
    }

    /// Returns `pages` from `space` to the free list. All-or-nothing.
    pub fn unmap(&mut self, space: &mut VirtualKvSpace, pages: &[PageId]) -> Result<(), KvcError> {
        let mut seen = BTreeSet::new();
        for &p in pages {
            let owned = (p as usize) < self.owner.len() && self.owner[p as usize] == space.role.into();
            if !owned || !space.contains(p) || !seen.insert(p) {
                return Err(KvcError::NotMapped { page: p, role: space.role });
            }
        }
        for &p in pages {
            space.unbind(p);
            self.owner[p as usize] = PageOwner::Free;
            self.free.push(p);
        }
        *self.counter(space.role) -= pages.len() as u32;
        Ok(())
    }

    /// Full scan of the ownership map: `(free, serving, rollout)`.
    pub fn recount(&self) -> (u32, u32, u32) {
        let mut c = (0, 0, 0);
        for o in &self.owner {
            match o {
                PageOwner::Free => c.0 += 1,
                PageOwner::Serving => c.1 += 1,
                PageOwner::Rollout => c.2 += 1,
            }
        }
        c
    }

    pub fn conservation_holds(&self) -> bool {
        self.free_pages() + self.serving + self.rollout == self.total_pages()
            && self.recount() == (self.free_pages(), self.serving, self.rollout)
    }
}

/// A model's contiguous virtual KV address space. Pages are bound to
/// virtual slots in ascending order; the layout tag is opaque.
#[derive(Debug, Clone)]
pub struct VirtualKvSpace {
    role: ModelRole,
    capacity_pages: u32,
    layout_tag: String,
    slots: BTreeMap<u32, PageId>,
    slot_of: BTreeMap<PageId, u32>,
    free_slots: BTreeSet<u32>,
    next_slot: u32,
}

impl VirtualKvSpace {
    pub fn new(role: ModelRole, capacity_pages: u32, layout_tag: impl Into<String>) -> Self {
        Self {
            role,
            capacity_pages,
            layout_tag: layout_tag.into(),
            slots: BTreeMap::new(),
            slot_of: BTreeMap::new(),
            free_slots: BTreeSet::new(),
            next_slot: 0,
        }
    }

    pub fn role(&self) -> ModelRole {
        self.role
    }

    pub fn capacity_pages(&self) -> u32 {
        self.capacity_pages
    }

    pub fn layout_tag(&self) -> &str {
        &self.layout_tag
    }

    pub fn mapped_len(&self) -> u32 {
        self.slots.len() as u32
    }

    pub fn contains(&self, page: PageId) -> bool {
        self.slot_of.contains_key(&page)
    }

    pub fn pages(&self) -> impl Iterator<Item = PageId> + '_ {
        self.slots.values().copied()
    }

    fn bind(&mut self, page: PageId) {
        let slot = match self.free_slots.pop_first() {
            Some(s) => s,
            None => {
                self.next_slot += 1;
                self.next_slot - 1
            }
        };
        self.slots.insert(slot, page);
        self.slot_of.insert(page, slot);
    }

    fn unbind(&mut self, page: PageId) {
        if let Some(slot) = self.slot_of.remove(&page) {
            self.slots.remove(&slot);
            self.free_slots.insert(slot);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixEntry {
    pub key: PrefixKey,
    pub pages: Vec<PageId>,
    pub tokens: u64,
    pub lease_expires_at: SimTime,
    pub last_touch: SimTime,
    pub trajectory_id: TrajId,
    /// Set while an in-flight request extends this prefix.
    pub pinned_by: Option<TrajId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixLookup {
    Hit { tokens: u64, pages: usize, lease_expires_at: SimTime },
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PressureState {
    #[default]
    Normal,
    Pressure,
    Frozen,
}

/// Per-GPU rollout KV budget and its pressure state machine.
#[derive(Debug, Clone)]
pub struct MemoryBudget {
    pub rollout_budget_pages: u32,
    /// Budget as set at the last step boundary; the watermark derives from it.
    pub step_budget_pages: u32,
    pub headroom_fraction: f64,
    pub watermark_into_headroom: f64,
    pub cut_factor: u32,
    pub state: PressureState,
    pub cuts_this_step: u32,
}

impl MemoryBudget {
    pub fn new(total_pages: u32, headroom_fraction: f64, watermark_into_headroom: f64, cut_factor: u32) -> Self {
        assert!(
            headroom_fraction >= 0.0 && headroom_fraction < 1.0,
            "headroom fraction must be in [0, 1)"
        );
        assert!(cut_factor >= 1);
        let cap = rollout_cap_pages(total_pages, headroom_fraction);
        Self {
            rollout_budget_pages: cap,
            step_budget_pages: cap,
            headroom_fraction,
            watermark_into_headroom,
            cut_factor,
            state: PressureState::Normal,
            cuts_this_step: 0,
        }
    }

    /// Pages reserved for serving bursts: `total - floor(total * (1 - H))`.
    pub fn headroom_pages(&self, total_pages: u32) -> u32 {
        total_pages - rollout_cap_pages(total_pages, self.headroom_fraction)
    }

    /// Serving usage above this enters the headroom band.
    pub fn high_watermark(&self, total_pages: u32) -> u32 {
        let h = self.headroom_pages(total_pages);
        let base = total_pages.saturating_sub(self.step_budget_pages).saturating_sub(h);
        let into = (self.watermark_into_headroom.clamp(0.0, 1.0) * h as f64).floor() as u32;
        (base + into).min(total_pages)
    }
}

/// `floor(total * (1 - H))`, the most rollout may ever hold.
pub fn rollout_cap_pages(total_pages: u32, headroom_fraction: f64) -> u32 {
    (total_pages as f64 * (1.0 - headroom_fraction) + 1e-9).floor() as u32
}

/// Step-boundary budget: the headroom-capped share minus the previous
/// window's peak serving usage, clamped at zero.
pub fn recompute_budget(budget: &mut MemoryBudget, prev_peak_serving: u32, total_pages: u32) -> u32 {
    let cap = rollout_cap_pages(total_pages, budget.headroom_fraction);
    let b = cap.saturating_sub(prev_peak_serving);
    budget.rollout_budget_pages = b;
    budget.step_budget_pages = b;
    budget.state = PressureState::Normal;
    budget.cuts_this_step = 0;
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryPolicy {
    /// Budgeted sharing with emergency cut under serving pressure.
    #[default]
    Preemptive,
    /// Memory split evenly and never rebalanced.
    StaticPartition,
}

#[derive(Debug, Clone)]
pub struct KvConfig {
    pub total_pages: u32,
    pub page_size: u64,
    pub headroom_fraction: f64,
    pub watermark_into_headroom: f64,
    pub cut_factor: u32,
    pub lease: Micros,
    pub lease_refresh: bool,
    pub prefix_caching: bool,
    pub policy: MemoryPolicy,
    pub serving_tokens_per_page: u64,
    pub rollout_tokens_per_page: u64,
    /// False on dedicated rollout GPUs: no serving model is resident.
    pub serving_resident: bool,
    pub serving_layout: String,
    pub rollout_layout: String,
}

impl KvConfig {
    pub fn dedicated(total_pages: u32, rollout_tokens_per_page: u64, lease: Micros, prefix_caching: bool) -> Self {
        Self {
            total_pages,
            page_size: DEFAULT_PAGE_SIZE,
            headroom_fraction: 0.0,
            watermark_into_headroom: 0.0,
            cut_factor: 2,
            lease,
            lease_refresh: true,
            prefix_caching,
            policy: MemoryPolicy::Preemptive,
            serving_tokens_per_page: 1,
            rollout_tokens_per_page,
            serving_resident: false,
            serving_layout: "none".into(),
            rollout_layout: "rollout".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PressureOutcome {
    NoAction,
    EmergencyCut { aborted: Vec<TrajId>, new_budget: u32 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryStats {
    pub cuts: u64,
    pub recut_suppressed: u64,
    pub prefix_hits: u64,
    pub prefix_misses: u64,
    pub lease_reclaimed_pages: u64,
    pub evicted_prefix_pages: u64,
    pub aborted_by_cut: u64,
    pub aborted_by_serving_reclaim: u64,
    pub serving_blocked: u64,
}

#[derive(Debug, Clone)]
struct RolloutKv {
    own: Vec<PageId>,
    tokens: u64,
    cached_tokens: u64,
    prefix: Option<PrefixKey>,
    started_at: SimTime,
}

#[derive(Debug, Clone, Default)]
struct ServingKv {
    pages: Vec<PageId>,
}

/// Result of growing a serving request's KV allocation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ServingAlloc {
    pub granted: bool,
    /// Rollout requests aborted to make room (serving-first memory).
    pub aborted: Vec<TrajId>,
}

/// Everything KV-related on one GPU.
#[derive(Debug, Clone)]
pub struct GpuMemory {
    cfg: KvConfig,
    pool: PhysicalPagePool,
    serving_space: VirtualKvSpace,
    rollout_space: VirtualKvSpace,
    prefix: BTreeMap<PrefixKey, PrefixEntry>,
    budget: MemoryBudget,
    rollout: BTreeMap<TrajId, RolloutKv>,
    serving: BTreeMap<ServingReqId, ServingKv>,
    above_watermark: bool,
    stats: MemoryStats,
}

pub fn pages_for(tokens: u64, tokens_per_page: u64) -> u32 {
    tokens.div_ceil(tokens_per_page.max(1)) as u32
}

impl GpuMemory {
    pub fn new(cfg: KvConfig) -> Self {
        let total = cfg.total_pages;
        let (serving_cap, rollout_cap, budget) = if !cfg.serving_resident {
            (0, total, MemoryBudget::new(total, 0.0, 0.0, cfg.cut_factor))
        } else {
            match cfg.policy {
                MemoryPolicy::Preemptive => (
                    total,
                    total,
                    MemoryBudget::new(total, cfg.headroom_fraction, cfg.watermark_into_headroom, cfg.cut_factor),
                ),
                MemoryPolicy::StaticPartition => {
                    let half = total / 2;
                    let mut b = MemoryBudget::new(total, 0.0, 0.0, 1);
                    b.rollout_budget_pages = total - half;
                    b.step_budget_pages = total - half;
                    (half, total - half, b)
                }
            }
        };
        Self {
            pool: PhysicalPagePool::new(total, cfg.page_size),
            serving_space: VirtualKvSpace::new(ModelRole::Serving, serving_cap, cfg.serving_layout.clone()),
            rollout_space: VirtualKvSpace::new(ModelRole::Rollout, rollout_cap, cfg.rollout_layout.clone()),
            prefix: BTreeMap::new(),
            budget,
            rollout: BTreeMap::new(),
            serving: BTreeMap::new(),
            above_watermark: false,
            stats: MemoryStats::default(),
            cfg,
        }
    }

    pub fn config(&self) -> &KvConfig {
        &self.cfg
    }

    pub fn pool(&self) -> &PhysicalPagePool {
        &self.pool
    }

    pub fn budget(&self) -> &MemoryBudget {
        &self.budget
    }

    pub fn stats(&self) -> MemoryStats {
        self.stats
    }

    /// Most pages serving requests may hold at once.
    pub fn serving_capacity_pages(&self) -> u32 {
        self.serving_space.capacity_pages()
    }

    pub fn total_pages(&self) -> u32 {
        self.pool.total_pages()
    }

    pub fn free_pages(&self) -> u32 {
        self.pool.free_pages()
    }

    pub fn serving_usage(&self) -> u32 {
        self.pool.owned_by(ModelRole::Serving)
    }

    pub fn rollout_usage(&self) -> u32 {
        self.pool.owned_by(ModelRole::Rollout)
    }

    pub fn prefix_entries(&self) -> usize {
        self.prefix.len()
    }

    pub fn prefix_entry(&self, key: PrefixKey) -> Option<&PrefixEntry> {
        self.prefix.get(&key)
    }

    pub fn active_rollout(&self) -> usize {
        self.rollout.len()
    }

    /// Pages held by in-flight rollout requests (excluding prefix entries).
    pub fn rollout_active_pages(&self) -> u32 {
        self.rollout.values().map(|r| r.own.len() as u32).sum()
    }

    fn unpinned_prefix_pages(&self) -> u32 {
        self.prefix
            .values()
            .filter(|e| e.pinned_by.is_none())
            .map(|e| e.pages.len() as u32)
            .sum()
    }

    // ---- serving side ----

    /// Grows serving request `req` to cover `tokens` tokens. Under the
    /// preemptive policy, missing free pages are reclaimed from rollout
    /// (prefix entries first, then youngest requests).
    pub fn serving_ensure(&mut self, req: ServingReqId, tokens: u64) -> ServingAlloc {
        let target = pages_for(tokens, self.cfg.serving_tokens_per_page);
        let have = self.serving.get(&req).map_or(0, |s| s.pages.len() as u32);
        if target <= have {
            return ServingAlloc { granted: true, aborted: Vec::new() };
        }
        let need = target - have;
        if self.serving_space.mapped_len() + need > self.serving_space.capacity_pages() {
            self.stats.serving_blocked += 1;
            return ServingAlloc::default();
        }
        let mut aborted = Vec::new();
        if self.pool.free_pages() < need && self.cfg.policy == MemoryPolicy::Preemptive {
            aborted = self.reclaim_rollout_for_serving(need);
        }
        if self.pool.free_pages() < need {
            self.stats.serving_blocked += 1;
            return ServingAlloc { granted: false, aborted };
        }
        let pages = self
            .pool
            .map(&mut self.serving_space, need)
            .expect("capacity and free pages checked");
        self.serving.entry(req).or_default().pages.extend(pages);
        ServingAlloc { granted: true, aborted }
    }

    /// Whether `extra` more serving pages could be granted right now.
    pub fn serving_can_grow(&self, extra: u32) -> bool {
        if self.serving_space.mapped_len() + extra > self.serving_space.capacity_pages() {
            return false;
        }
        let reclaimable = if self.cfg.policy == MemoryPolicy::Preemptive {
            self.rollout_usage()
        } else {
            0
        };
        extra <= self.pool.free_pages() + reclaimable
    }

    pub fn serving_pages(&self, req: ServingReqId) -> u32 {
        self.serving.get(&req).map_or(0, |s| s.pages.len() as u32)
    }

    pub fn serving_release(&mut self, req: ServingReqId) {
        if let Some(s) = self.serving.remove(&req) {
            self.pool
                .unmap(&mut self.serving_space, &s.pages)
                .expect("serving pages are mapped");
        }
    }

    fn reclaim_rollout_for_serving(&mut self, need: u32) -> Vec<TrajId> {
        let mut aborted = Vec::new();
        while self.pool.free_pages() < need {
            if self.evict_lru_prefix().is_some() {
                continue;
            }
            match self.youngest_rollout() {
                Some(t) => {
                    self.rollout_abort(t);
                    self.stats.aborted_by_serving_reclaim += 1;
                    aborted.push(t);
                }
                None => break,
            }
        }
        aborted
    }

    // ---- rollout side ----

    /// Registers an in-flight rollout request. When prefix caching is on and
    /// `prefix_key` names a live entry, the entry is pinned and its tokens
    /// need not be prefilled again. Returns the number of cached tokens.
    pub fn rollout_begin(&mut self, traj: TrajId, prefix_key: Option<PrefixKey>, now: SimTime) -> u64 {
        if self.rollout.contains_key(&traj) {
            self.rollout_abort(traj);
        }
        let mut cached = 0;
        let mut pinned = None;
        if let Some(key) = prefix_key.filter(|_| self.cfg.prefix_caching) {
            match self.lookup_prefix(key, now) {
                PrefixLookup::Hit { tokens, .. } if self.prefix[&key].pinned_by.is_none() => {
                    self.prefix.get_mut(&key).unwrap().pinned_by = Some(traj);
                    cached = tokens;
                    pinned = Some(key);
                }
                _ => {}
            }
        }
        self.rollout.insert(
            traj,
            RolloutKv {
                own: Vec::new(),
                tokens: cached,
                cached_tokens: cached,
                prefix: pinned,
                started_at: now,
            },
        );
        cached
    }

    fn extra_pages(&self, r: &RolloutKv, tokens_after: u64) -> u32 {
        let own_tokens = tokens_after.saturating_sub(r.cached_tokens);
        pages_for(own_tokens, self.cfg.rollout_tokens_per_page).saturating_sub(r.own.len() as u32)
    }

    /// Pages that growing each listed request to its target would add.
    pub fn rollout_growth_pages(&self, growth: &[(TrajId, u64)]) -> Result<u32, KvcError> {
        let mut total = 0;
        for &(t, after) in growth {
            let r = self.rollout.get(&t).ok_or(KvcError::UnknownTrajectory(t))?;
            total += self.extra_pages(r, after);
        }
        Ok(total)
    }

    /// KV admission check: growth stays within the rollout budget and the
    /// pool, counting unpinned prefix entries as evictable.
    pub fn rollout_can_grow(&self, growth: &[(TrajId, u64)]) -> bool {
        let Ok(extra) = self.rollout_growth_pages(growth) else {
            return false;
        };
        if extra == 0 {
            return true;
        }
        let evictable = self.unpinned_prefix_pages();
        let usage_floor = self.rollout_usage() - evictable;
        usage_floor + extra <= self.budget.rollout_budget_pages
            && self.rollout_space.mapped_len() - evictable + extra <= self.rollout_space.capacity_pages()
            && extra <= self.pool.free_pages() + evictable
    }

    /// Grows the listed requests, evicting LRU prefix entries as needed.
    pub fn rollout_grow(&mut self, growth: &[(TrajId, u64)], now: SimTime) -> Result<(), KvcError> {
        if !self.rollout_can_grow(growth) {
            let extra = self.rollout_growth_pages(growth)?;
            return Err(KvcError::OutOfPages {
                requested: extra,
                free: self.pool.free_pages(),
            });
        }
        let extra = self.rollout_growth_pages(growth)?;
        while self.rollout_usage() + extra > self.budget.rollout_budget_pages
            || self.pool.free_pages() < extra
            || self.rollout_space.mapped_len() + extra > self.rollout_space.capacity_pages()
        {
            self.evict_lru_prefix().expect("admission counted evictable prefix pages");
        }
        for &(t, after) in growth {
            let n = self.extra_pages(&self.rollout[&t], after);
            let pages = self.pool.map(&mut self.rollout_space, n)?;
            let r = self.rollout.get_mut(&t).unwrap();
            r.own.extend(pages);
            r.tokens = r.tokens.max(after);
            if let Some(key) = r.prefix {
                self.touch(key, now);
            }
        }
        debug_assert!(self.serving_first_holds());
        Ok(())
    }

    /// Turn finished: the whole context becomes a prefix entry under
    /// `new_key` (if caching and a key is given) or is freed.
    pub fn rollout_finish_turn(&mut self, traj: TrajId, new_key: Option<PrefixKey>, now: SimTime) -> Result<(), KvcError> {
        let r = self.rollout.remove(&traj).ok_or(KvcError::UnknownTrajectory(traj))?;
        let old = r.prefix.and_then(|k| self.prefix.remove(&k));
        match new_key.filter(|_| self.cfg.prefix_caching) {
            Some(key) => {
                let mut pages = old.map(|e| e.pages).unwrap_or_default();
                pages.extend(r.own);
                let tokens = r.tokens;
                if let Some(prev) = self.prefix.remove(&key) {
                    self.release_pages(&prev.pages);
                }
                self.prefix.insert(
                    key,
                    PrefixEntry {
                        key,
                        pages,
                        tokens,
                        lease_expires_at: now + self.cfg.lease,
                        last_touch: now,
                        trajectory_id: traj,
                        pinned_by: None,
                    },
                );
            }
            None => {
                if let Some(e) = old {
                    self.release_pages(&e.pages);
                }
                self.release_pages(&r.own);
            }
        }
        Ok(())
    }

    /// Drops an in-flight request: its own pages are freed at once, a
    /// pinned prefix entry is left to its lease.
    pub fn rollout_abort(&mut self, traj: TrajId) -> bool {
        let Some(r) = self.rollout.remove(&traj) else {
            return false;
        };
        if let Some(e) = r.prefix.and_then(|k| self.prefix.get_mut(&k)) {
            e.pinned_by = None;
        }
        self.release_pages(&r.own);
        true
    }

    pub fn rollout_tokens(&self, traj: TrajId) -> Option<u64> {
        self.rollout.get(&traj).map(|r| r.tokens)
    }

    /// Frees every rollout page (runtime deactivation or crash).
    pub fn clear_rollout(&mut self) -> Vec<TrajId> {
        let trajs: Vec<TrajId> = self.rollout.keys().copied().collect();
        for &t in &trajs {
            self.rollout_abort(t);
        }
        let keys: Vec<PrefixKey> = self.prefix.keys().copied().collect();
        for k in keys {
            let e = self.prefix.remove(&k).unwrap();
            self.release_pages(&e.pages);
        }
        trajs
    }

    fn release_pages(&mut self, pages: &[PageId]) {
        self.pool
            .unmap(&mut self.rollout_space, pages)
            .expect("rollout pages are mapped");
    }

    fn youngest_rollout(&self) -> Option<TrajId> {
        self.rollout
            .iter()
            .max_by_key(|(&t, r)| (r.started_at, t))
            .map(|(&t, _)| t)
    }

    fn evict_lru_prefix(&mut self) -> Option<PrefixKey> {
        let key = self
            .prefix
            .values()
            .filter(|e| e.pinned_by.is_none())
            .min_by_key(|e| (e.last_touch, e.key))
            .map(|e| e.key)?;
        let e = self.prefix.remove(&key).unwrap();
        self.stats.evicted_prefix_pages += e.pages.len() as u64;
        self.release_pages(&e.pages);
        Some(key)
    }

    // ---- prefix cache ----

    fn touch(&mut self, key: PrefixKey, now: SimTime) {
        let (lease, refresh) = (self.cfg.lease, self.cfg.lease_refresh);
        if let Some(e) = self.prefix.get_mut(&key) {
            e.last_touch = e.last_touch.max(now);
            if refresh {
                e.lease_expires_at = e.lease_expires_at.max(now + lease);
            }
            e.lease_expires_at = e.lease_expires_at.max(e.last_touch);
        }
    }

    /// Stores a prefix entry over rollout `pages` with a fresh lease. A
    /// duplicate key replaces the old entry (freeing pages it no longer uses).
    pub fn insert_prefix(
        &mut self,
        key: PrefixKey,
        pages: Vec<PageId>,
        tokens: u64,
        traj: TrajId,
        now: SimTime,
    ) -> Result<&PrefixEntry, KvcError> {
        for &p in &pages {
            if self.pool.owner(p) != PageOwner::Rollout {
                return Err(KvcError::NotRolloutPages(ModelRole::Serving));
            }
        }
        if let Some(prev) = self.prefix.remove(&key) {
            let keep: BTreeSet<PageId> = pages.iter().copied().collect();
            let drop: Vec<PageId> = prev.pages.into_iter().filter(|p| !keep.contains(p)).collect();
            self.release_pages(&drop);
        }
        self.prefix.insert(
            key,
            PrefixEntry {
                key,
                pages,
                tokens,
                lease_expires_at: now + self.cfg.lease,
                last_touch: now,
                trajectory_id: traj,
                pinned_by: None,
            },
        );
        Ok(&self.prefix[&key])
    }

    /// Maps fresh rollout pages that are not attached to any request; used
    /// with [`GpuMemory::insert_prefix`] to seed entries directly.
    pub fn map_rollout_pages(&mut self, n: u32) -> Result<Vec<PageId>, KvcError> {
        self.pool.map(&mut self.rollout_space, n)
    }

    /// A hit refreshes `last_touch` (and the lease when renewal is on); an
    /// expired entry is reclaimed and reported as a miss.
    pub fn lookup_prefix(&mut self, key: PrefixKey, now: SimTime) -> PrefixLookup {
        let Some(e) = self.prefix.get(&key) else {
            self.stats.prefix_misses += 1;
            return PrefixLookup::Miss;
        };
        if e.lease_expires_at <= now && e.pinned_by.is_none() {
            let e = self.prefix.remove(&key).unwrap();
            self.stats.lease_reclaimed_pages += e.pages.len() as u64;
            self.release_pages(&e.pages);
            self.stats.prefix_misses += 1;
            return PrefixLookup::Miss;
        }
        self.touch(key, now);
        self.stats.prefix_hits += 1;
        let e = &self.prefix[&key];
        PrefixLookup::Hit {
            tokens: e.tokens,
            pages: e.pages.len(),
            lease_expires_at: e.lease_expires_at,
        }
    }

    /// Removes every entry whose lease has run out. An expired entry that is
    /// pinned by an in-flight request hands its pages to that request.
    /// Returns the number of pages returned to the free list.
    pub fn expire_leases(&mut self, now: SimTime) -> u32 {
        let expired: Vec<PrefixKey> = self
            .prefix
            .values()
            .filter(|e| e.lease_expires_at <= now)
            .map(|e| e.key)
            .collect();
        let mut reclaimed = 0;
        for key in expired {
            let e = self.prefix.remove(&key).unwrap();
            match e.pinned_by.and_then(|t| self.rollout.get_mut(&t)) {
                Some(r) => {
                    let mut pages = e.pages;
                    pages.append(&mut r.own);
                    r.own = pages;
                    r.cached_tokens = 0;
                    r.prefix = None;
                }
                None => {
                    reclaimed += e.pages.len() as u32;
                    self.release_pages(&e.pages);
                }
            }
        }
        self.stats.lease_reclaimed_pages += reclaimed as u64;
        reclaimed
    }

    pub fn next_lease_expiry(&self) -> Option<SimTime> {
        self.prefix.values().map(|e| e.lease_expires_at).min()
    }

    // ---- budget policy ----

    /// Burst trigger, emergency cut and freeze. Called whenever serving
    /// usage may have grown.
    pub fn on_serving_pressure(&mut self) -> PressureOutcome {
        if !self.cfg.serving_resident || self.cfg.policy != MemoryPolicy::Preemptive {
            return PressureOutcome::NoAction;
        }
        let total = self.total_pages();
        let above = self.serving_usage() > self.budget.high_watermark(total);
        let crossed = above && !self.above_watermark;
        self.above_watermark = above;
        if !above {
            return PressureOutcome::NoAction;
        }
        if self.budget.state != PressureState::Normal {
            if crossed {
                self.stats.recut_suppressed += 1;
            }
            return PressureOutcome::NoAction;
        }
        self.budget.state = PressureState::Pressure;
        let new_budget = self.budget.rollout_budget_pages / self.budget.cut_factor;
        self.budget.rollout_budget_pages = new_budget;
        self.budget.cuts_this_step += 1;
        self.stats.cuts += 1;
        let mut aborted = Vec::new();
        // Abort only what evicting every unpinned prefix entry could not cover.
        while self.rollout_usage() - self.unpinned_prefix_pages() > new_budget {
            let Some(t) = self.youngest_rollout() else { break };
            self.rollout_abort(t);
            aborted.push(t);
        }
        while self.rollout_usage() > new_budget {
            if self.evict_lru_prefix().is_none() {
                break;
            }
        }
        self.stats.aborted_by_cut += aborted.len() as u64;
        self.budget.state = PressureState::Frozen;
        PressureOutcome::EmergencyCut { aborted, new_budget }
    }

    /// Step boundary: new budget from the previous window's peak serving
    /// usage; leaves the frozen state.
    pub fn recompute_budget(&mut self, prev_peak_serving: u32) -> u32 {
        if !self.cfg.serving_resident || self.cfg.policy == MemoryPolicy::StaticPartition {
            self.budget.state = PressureState::Normal;
            self.budget.cuts_this_step = 0;
            return self.budget.rollout_budget_pages;
        }
        let total = self.total_pages();
        self.above_watermark = false;
        recompute_budget(&mut self.budget, prev_peak_serving, total)
    }

    fn serving_first_holds(&self) -> bool {
        if !self.cfg.serving_resident || self.cfg.policy != MemoryPolicy::Preemptive {
            return true;
        }
        let total = self.total_pages();
        let h = self.budget.headroom_pages(total);
        // rollout may sit above a freshly cut budget until reclaimed, never above the cap
        self.rollout_usage() <= rollout_cap_pages(total, self.budget.headroom_fraction) || total - self.rollout_usage() >= h
    }

    /// Exhaustive consistency check used by invariant-checking runs.
    pub fn check_invariants(&self) -> Result<(), String> {
        let (free, serving, rollout) = self.pool.recount();
        if (free, serving, rollout) != (self.free_pages(), self.serving_usage(), self.rollout_usage()) {
            return Err(format!(
                "page counters drifted: recount ({free},{serving},{rollout}) vs ({},{},{})",
                self.free_pages(),
                self.serving_usage(),
                self.rollout_usage()
            ));
        }
        if free + serving + rollout != self.total_pages() {
            return Err("page conservation violated".into());
        }
        if self.serving_space.mapped_len() != serving || self.rollout_space.mapped_len() != rollout {
            return Err("virtual spaces disagree with pool ownership".into());
        }
        if self.serving_space.mapped_len() > self.serving_space.capacity_pages()
            || self.rollout_space.mapped_len() > self.rollout_space.capacity_pages()
        {
            return Err("space over capacity".into());
        }
        for p in self.serving_space.pages() {
            if self.pool.owner(p) != PageOwner::Serving || self.rollout_space.contains(p) {
                return Err(format!("serving page {p} has wrong owner or is shared"));
            }
        }
        let mut rollout_pages = BTreeSet::new();
        let mut claim = |p: PageId| rollout_pages.insert(p);
        for r in self.rollout.values() {
            for &p in &r.own {
                if !claim(p) {
                    return Err(format!("rollout page {p} claimed twice"));
                }
            }
        }
        for e in self.prefix.values() {
            if e.lease_expires_at < e.last_touch {
                return Err(format!("prefix {} lease ends before last touch", e.key));
            }
            if let Some(t) = e.pinned_by {
                if self.rollout.get(&t).and_then(|r| r.prefix) != Some(e.key) {
                    return Err(format!("prefix {} pinned by {t} which does not reference it", e.key));
                }
            }
            for &p in &e.pages {
                if !claim(p) {
                    return Err(format!("rollout page {p} claimed twice"));
                }
            }
        }
        if rollout_pages.len() as u32 != rollout || rollout_pages.iter().any(|&p| self.pool.owner(p) != PageOwner::Rollout) {
            return Err("rollout pages not exactly covered by requests and prefix entries".into());
        }
        if self.cfg.serving_resident && self.cfg.policy == MemoryPolicy::Preemptive {
            let cap = rollout_cap_pages(self.total_pages(), self.budget.headroom_fraction);
            if self.budget.rollout_budget_pages > cap {
                return Err("rollout budget exceeds headroom cap".into());
            }
            if rollout > cap {
                return Err(format!("rollout holds {rollout} pages, above the headroom cap {cap}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::secs;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn serving_gpu(total: u32) -> GpuMemory {
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
            serving_tokens_per_page: 1,
            rollout_tokens_per_page: 1,
            serving_resident: true,
            serving_layout: "serving-7b".into(),
            rollout_layout: "rollout-8b".into(),
        })
    }

    #[test]
    fn map_on_fresh_pool() {
        let mut pool = PhysicalPagePool::new(100, DEFAULT_PAGE_SIZE);
        let mut s = VirtualKvSpace::new(ModelRole::Serving, 100, "s");
        let pages = pool.map(&mut s, 10).unwrap();
        assert_eq!(pages.len(), 10);
        assert_eq!(pool.free_pages(), 90);
        assert_eq!(pool.owned_by(ModelRole::Serving), 10);
        assert!(pool.conservation_holds());
    }

    #[test]
    fn map_zero_is_noop() {
        let mut pool = PhysicalPagePool::new(4, DEFAULT_PAGE_SIZE);
        let mut s = VirtualKvSpace::new(ModelRole::Rollout, 4, "r");
        assert!(pool.map(&mut s, 0).unwrap().is_empty());
        assert_eq!(pool.free_pages(), 4);
    }

    #[test]
    fn map_errors() {
        let mut pool = PhysicalPagePool::new(4, DEFAULT_PAGE_SIZE);
        let mut s = VirtualKvSpace::new(ModelRole::Serving, 2, "s");
        assert!(matches!(pool.map(&mut s, 3), Err(KvcError::SpaceFull { .. })));
        let mut r = VirtualKvSpace::new(ModelRole::Rollout, 10, "r");
        assert_eq!(pool.map(&mut r, 5), Err(KvcError::OutOfPages { requested: 5, free: 4 }));
    }

    #[test]
    fn unmap_restores_pool() {
        let mut pool = PhysicalPagePool::new(100, DEFAULT_PAGE_SIZE);
        let mut s = VirtualKvSpace::new(ModelRole::Serving, 100, "s");
        let pages = pool.map(&mut s, 10).unwrap();
        pool.unmap(&mut s, &pages).unwrap();
        assert_eq!(pool.free_pages(), 100);
        assert_eq!(s.mapped_len(), 0);
    }

    #[test]
    fn rebalance_moves_pages_without_growing_pool() {
        let mut pool = PhysicalPagePool::new(20, DEFAULT_PAGE_SIZE);
        let mut serving = VirtualKvSpace::new(ModelRole::Serving, 20, "s");
        let mut rollout = VirtualKvSpace::new(ModelRole::Rollout, 20, "r");
        pool.map(&mut serving, 10).unwrap();
        let r = pool.map(&mut rollout, 10).unwrap();
        assert_eq!(pool.free_pages(), 0);
        pool.unmap(&mut rollout, &r[..5]).unwrap();
        pool.map(&mut serving, 5).unwrap();
        assert_eq!(pool.owned_by(ModelRole::Serving), 15);
        assert_eq!(pool.owned_by(ModelRole::Rollout), 5);
        assert_eq!(pool.total_pages(), 20);
        // layouts never share pages
        assert!(serving.pages().all(|p| !rollout.contains(p)));
    }

    #[test]
    fn unmap_foreign_page_fails_atomically() {
        let mut pool = PhysicalPagePool::new(10, DEFAULT_PAGE_SIZE);
        let mut serving = VirtualKvSpace::new(ModelRole::Serving, 10, "s");
        let mut rollout = VirtualKvSpace::new(ModelRole::Rollout, 10, "r");
        let s = pool.map(&mut serving, 2).unwrap();
        let r = pool.map(&mut rollout, 2).unwrap();
        let err = pool.unmap(&mut rollout, &[r[0], s[0]]).unwrap_err();
        assert_eq!(err, KvcError::NotMapped { page: s[0], role: ModelRole::Rollout });
        assert_eq!(pool.owned_by(ModelRole::Rollout), 2);
        assert!(pool.conservation_holds());
    }

    #[test]
    fn random_map_unmap_sequence_conserves_pages() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut pool = PhysicalPagePool::new(64, DEFAULT_PAGE_SIZE);
        let mut spaces = [
            VirtualKvSpace::new(ModelRole::Serving, 64, "s"),
            VirtualKvSpace::new(ModelRole::Rollout, 64, "r"),
        ];
        let mut held: [Vec<PageId>; 2] = [Vec::new(), Vec::new()];
        for _ in 0..1000 {
            let i = rng.random_range(0..2);
            if rng.random_bool(0.5) {
                let n = rng.random_range(0..8);
                if let Ok(p) = pool.map(&mut spaces[i], n) {
                    held[i].extend(p);
                }
            } else if !held[i].is_empty() {
                let n = rng.random_range(1..=held[i].len());
                let drop: Vec<PageId> = held[i].drain(..n).collect();
                pool.unmap(&mut spaces[i], &drop).unwrap();
            }
            // oracle: recount ownership from scratch
            let (f, s, r) = pool.recount();
            assert_eq!(f + s + r, 64);
            assert_eq!((s, r), (held[0].len() as u32, held[1].len() as u32));
        }
    }

    #[test]
    fn prefix_lease_insert_and_refresh() {
        let mut m = serving_gpu(100);
        let pages = m.map_rollout_pages(3).unwrap();
        let e = m.insert_prefix(1, pages, 30, 9, 0).unwrap();
        assert_eq!(e.lease_expires_at, secs(10));
        assert!(matches!(m.lookup_prefix(1, secs(6)), PrefixLookup::Hit { lease_expires_at, .. } if lease_expires_at == secs(16)));
    }

    #[test]
    fn lookup_within_lease_hits_and_after_expiry_misses() {
        let mut m = serving_gpu(100);
        let pages = m.map_rollout_pages(2).unwrap();
        m.insert_prefix(5, pages, 20, 1, 0).unwrap();
        assert!(matches!(m.lookup_prefix(5, secs(5)), PrefixLookup::Hit { .. }));
        // expired 1us ago (lease refreshed to 15 s by the hit)
        assert_eq!(m.lookup_prefix(5, secs(15) + 1), PrefixLookup::Miss);
        assert_eq!(m.rollout_usage(), 0);
    }

    #[test]
    fn zero_lease_expires_on_next_processing() {
        let mut m = serving_gpu(100);
        m.cfg.lease = 0;
        let pages = m.map_rollout_pages(2).unwrap();
        m.insert_prefix(5, pages, 20, 1, secs(1)).unwrap();
        assert_eq!(m.expire_leases(secs(1)), 2);
        assert_eq!(m.prefix_entries(), 0);
    }

    #[test]
    fn duplicate_prefix_key_replaces_entry() {
        let mut m = serving_gpu(100);
        let a = m.map_rollout_pages(2).unwrap();
        m.insert_prefix(5, a, 20, 1, 0).unwrap();
        let b = m.map_rollout_pages(3).unwrap();
        m.insert_prefix(5, b, 30, 1, secs(2)).unwrap();
        assert_eq!(m.prefix_entries(), 1);
        assert_eq!(m.rollout_usage(), 3);
        assert_eq!(m.prefix_entry(5).unwrap().lease_expires_at, secs(12));
        m.check_invariants().unwrap();
    }

    #[test]
    fn expire_at_threshold() {
        let mut m = serving_gpu(100);
        m.cfg.lease = secs(5);
        // leases end at 5, 10 and 15 s
        for (k, t) in [(1u64, 0u64), (2, 5), (3, 10)] {
            let p = m.map_rollout_pages(1).unwrap();
            m.insert_prefix(k, p, 1, k, secs(t)).unwrap();
        }
        assert_eq!(m.expire_leases(secs(10)), 2);
        assert_eq!(m.prefix_entries(), 1);
        assert_eq!(m.expire_leases(secs(10)), 0);
        m.check_invariants().unwrap();
    }

    #[test]
    fn expire_with_no_entries() {
        let mut m = serving_gpu(10);
        assert_eq!(m.expire_leases(secs(100)), 0);
    }

    #[test]
    fn recompute_budget_arithmetic() {
        let mut b = MemoryBudget::new(100, 0.2, 0.0, 2);
        assert_eq!(recompute_budget(&mut b, 30, 100), 50);
        assert_eq!(recompute_budget(&mut b, 90, 100), 0);
        assert_eq!(b.state, PressureState::Normal);
        assert_eq!(b.headroom_pages(100), 20);
    }

    fn fill_rollout(m: &mut GpuMemory, trajs: &[(TrajId, u64)], start: SimTime) {
        for (i, &(t, tokens)) in trajs.iter().enumerate() {
            m.rollout_begin(t, None, start + i as u64);
            m.rollout_grow(&[(t, tokens)], start + i as u64).unwrap();
        }
    }

    #[test]
    fn emergency_cut_halves_budget_and_aborts_youngest() {
        let mut m = serving_gpu(100);
        m.recompute_budget(40); // budget 40, watermark 40
        assert_eq!(m.budget().rollout_budget_pages, 40);
        fill_rollout(&mut m, &[(1, 10), (2, 10), (3, 10), (4, 10)], 0);
        assert_eq!(m.rollout_usage(), 40);
        m.serving_ensure(100, 41);
        match m.on_serving_pressure() {
            PressureOutcome::EmergencyCut { aborted, new_budget } => {
                assert_eq!(new_budget, 20);
                assert_eq!(aborted, vec![4, 3]);
            }
            other => panic!("expected a cut, got {other:?}"),
        }
        assert_eq!(m.budget().state, PressureState::Frozen);
        assert!(m.rollout_usage() <= 20);
        m.check_invariants().unwrap();
    }

    #[test]
    fn no_second_cut_while_frozen() {
        let mut m = serving_gpu(100);
        m.recompute_budget(40);
        m.serving_ensure(100, 41);
        assert!(matches!(m.on_serving_pressure(), PressureOutcome::EmergencyCut { .. }));
        m.serving_release(100);
        assert_eq!(m.on_serving_pressure(), PressureOutcome::NoAction);
        m.serving_ensure(101, 45);
        assert_eq!(m.on_serving_pressure(), PressureOutcome::NoAction);
        assert_eq!(m.budget().rollout_budget_pages, 20);
        assert_eq!(m.stats().recut_suppressed, 1);
        // a step boundary unfreezes
        m.recompute_budget(45);
        assert_eq!(m.budget().state, PressureState::Normal);
    }

    #[test]
    fn below_watermark_no_action() {
        let mut m = serving_gpu(100);
        m.recompute_budget(40);
        m.serving_ensure(1, 40);
        assert_eq!(m.on_serving_pressure(), PressureOutcome::NoAction);
    }

    #[test]
    fn cut_evicts_prefix_lru_before_extra_aborts() {
        let mut m = serving_gpu(100);
        m.recompute_budget(40);
        for k in 0..3u64 {
            let p = m.map_rollout_pages(8).unwrap();
            m.insert_prefix(k, p, 8, k, secs(k)).unwrap();
        }
        fill_rollout(&mut m, &[(9, 10)], secs(5));
        m.serving_ensure(1, 50);
        let PressureOutcome::EmergencyCut { aborted, .. } = m.on_serving_pressure() else { panic!() };
        assert!(aborted.is_empty());
        assert_eq!(m.prefix_entry(0), None);
        assert!(m.prefix_entry(2).is_some());
        assert!(m.rollout_usage() <= 20);
    }

    #[test]
    fn serving_reclaims_rollout_when_pool_is_full() {
        let mut m = serving_gpu(100);
        fill_rollout(&mut m, &[(1, 40), (2, 40)], 0);
        let a = m.serving_ensure(7, 50);
        assert!(a.granted);
        assert_eq!(a.aborted, vec![2]);
        m.check_invariants().unwrap();
    }

    #[test]
    fn static_partition_blocks_serving_at_half() {
        let mut cfg = serving_gpu(100).cfg;
        cfg.policy = MemoryPolicy::StaticPartition;
        let mut m = GpuMemory::new(cfg);
        assert!(m.serving_ensure(1, 50).granted);
        assert!(!m.serving_ensure(2, 1).granted);
        m.serving_ensure(1, 80);
        assert_eq!(m.on_serving_pressure(), PressureOutcome::NoAction);
        assert_eq!(m.budget().rollout_budget_pages, 50);
    }

    #[test]
    fn prefix_hit_charges_only_new_tokens_and_survives_abort() {
        let mut m = serving_gpu(100);
        m.rollout_begin(1, None, 0);
        m.rollout_grow(&[(1, 12)], 0).unwrap();
        m.rollout_finish_turn(1, Some(77), secs(1)).unwrap();
        assert_eq!(m.rollout_usage(), 12);
        let cached = m.rollout_begin(1, Some(77), secs(3));
        assert_eq!(cached, 12);
        m.rollout_grow(&[(1, 15)], secs(3)).unwrap();
        assert_eq!(m.rollout_usage(), 15);
        // a stall drops the request but the prefix stays leased
        m.rollout_abort(1);
        assert_eq!(m.rollout_usage(), 12);
        assert!(m.prefix_entry(77).is_some());
        m.check_invariants().unwrap();
    }

    #[test]
    fn finish_turn_rolls_prefix_forward() {
        let mut m = serving_gpu(100);
        m.rollout_begin(1, None, 0);
        m.rollout_grow(&[(1, 10)], 0).unwrap();
        m.rollout_finish_turn(1, Some(1), 0).unwrap();
        m.rollout_begin(1, Some(1), secs(1));
        m.rollout_grow(&[(1, 20)], secs(1)).unwrap();
        m.rollout_finish_turn(1, Some(2), secs(2)).unwrap();
        assert_eq!(m.prefix_entries(), 1);
        assert_eq!(m.prefix_entry(2).unwrap().tokens, 20);
        assert_eq!(m.rollout_usage(), 20);
        m.rollout_begin(1, Some(2), secs(3));
        m.rollout_finish_turn(1, None, secs(4)).unwrap();
        assert_eq!(m.rollout_usage(), 0);
    }

    #[test]
    fn expiry_of_pinned_entry_transfers_pages() {
        let mut m = serving_gpu(100);
        m.rollout_begin(1, None, 0);
        m.rollout_grow(&[(1, 10)], 0).unwrap();
        m.rollout_finish_turn(1, Some(1), 0).unwrap();
        m.rollout_begin(1, Some(1), secs(1));
        assert_eq!(m.expire_leases(secs(60)), 0);
        assert_eq!(m.rollout_usage(), 10);
        m.check_invariants().unwrap();
        m.rollout_abort(1);
        assert_eq!(m.rollout_usage(), 0);
    }

    #[test]
    fn kv_admission_respects_budget() {
        let mut m = serving_gpu(100);
        m.recompute_budget(60); // budget 20
        m.rollout_begin(1, None, 0);
        assert!(m.rollout_can_grow(&[(1, 20)]));
        assert!(!m.rollout_can_grow(&[(1, 21)]));
    }

    #[test]
    fn watermark_fraction_moves_trigger() {
        let mut b = MemoryBudget::new(100, 0.2, 0.5, 2);
        recompute_budget(&mut b, 30, 100);
        assert_eq!(b.high_watermark(100), 40);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Begin(u8, bool),
        Grow(u8, u8),
        Finish(u8, bool),
        Abort(u8),
        Serve(u8, u8),
        Release(u8),
        Pressure,
        Expire(u8),
        Step(u8),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..6, any::<bool>()).prop_map(|(t, k)| Op::Begin(t, k)),
            (0u8..6, 1u8..40).prop_map(|(t, n)| Op::Grow(t, n)),
            (0u8..6, any::<bool>()).prop_map(|(t, k)| Op::Finish(t, k)),
            (0u8..6).prop_map(Op::Abort),
            (0u8..5, 1u8..60).prop_map(|(r, n)| Op::Serve(r, n)),
            (0u8..5).prop_map(Op::Release),
            Just(Op::Pressure),
            (0u8..30).prop_map(Op::Expire),
            (0u8..80).prop_map(Op::Step),
        ]
    }

    proptest! {
        #[test]
        fn invariants_hold_under_random_ops(ops in proptest::collection::vec(op(), 1..200)) {
            let mut m = serving_gpu(120);
            let mut now = 0;
            let mut budget_floor: Option<u32> = None;
            for o in ops {
                now += secs(1);
                match o {
                    Op::Begin(t, k) => { m.rollout_begin(t as u64, k.then_some(t as u64), now); }
                    Op::Grow(t, n) => {
                        if let Some(cur) = m.rollout_tokens(t as u64) {
                            let g = [(t as u64, cur + n as u64)];
                            if m.rollout_can_grow(&g) { m.rollout_grow(&g, now).unwrap(); }
                        }
                    }
                    Op::Finish(t, k) => { let _ = m.rollout_finish_turn(t as u64, k.then_some(t as u64), now); }
                    Op::Abort(t) => { m.rollout_abort(t as u64); }
                    Op::Serve(r, n) => { let cur = m.serving_pages(r as u64) as u64; m.serving_ensure(r as u64, cur + n as u64); }
                    Op::Release(r) => m.serving_release(r as u64),
                    Op::Pressure => {
                        if let PressureOutcome::EmergencyCut { .. } = m.on_serving_pressure() {
                            budget_floor = Some(m.budget().rollout_budget_pages);
                        }
                    }
                    Op::Expire(dt) => { m.expire_leases(now + secs(dt as u64)); now += secs(dt as u64); }
                    Op::Step(peak) => { m.recompute_budget(peak as u32); budget_floor = None; }
                }
                prop_assert!(m.check_invariants().is_ok(), "{:?}", m.check_invariants());
                if let Some(b) = budget_floor {
                    // frozen budget never grows within the step
                    prop_assert!(m.budget().rollout_budget_pages <= b);
                }
                prop_assert!(m.budget().cuts_this_step <= 1);
            }
        }
    }
}
