//! Run configuration. Durations are in seconds unless a key ends in `_us`
//! or belongs to `[executor]` / `[scheduler]`, which use microseconds.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::executor::ExecConfig;
use crate::kvc::MemoryPolicy;
use crate::scheduler::SchedConfig;
use crate::workload::{StepMode, SyntheticTrace, TrajectoryShape};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("TOML syntax: {0}")]
    Syntax(String),
    #[error("at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error("override `{key}`: {reason}")]
    Override { key: String, reason: String },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub seed: u64,
    pub steps: u32,
    /// Hard stop; unfinished trajectories are dropped.
    pub max_time_s: f64,
    /// Check executor, memory and scheduler invariants after every event.
    pub check_invariants: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        Self { seed: 1, steps: 3, max_time_s: 7200.0, check_invariants: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub dedicated_gpus: u32,
    pub serving_gpus: u32,
    /// Prefill/decode disaggregation; otherwise every serving GPU is colocated.
    pub pd_disaggregated: bool,
    /// Prefill instances among the serving GPUs.
    pub prefillers: u32,
    /// Serving GPUs lent to rollout per step.
    pub borrow_cap: u32,
    pub activation_s: f64,
    pub gpu_class: String,
    pub serving_model: String,
    pub rollout_model: String,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            dedicated_gpus: 2,
            serving_gpus: 4,
            pd_disaggregated: true,
            prefillers: 1,
            borrow_cap: 2,
            activation_s: 5.0,
            gpu_class: "h800".into(),
            serving_model: "qwen3-8b".into(),
            rollout_model: "qwen3-8b".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServingSection {
    /// Trace CSV; when absent a synthetic bursty trace is generated.
    pub trace: Option<PathBuf>,
    pub time_scale: f64,
    pub rate_scale: f64,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub synthetic: SyntheticTrace,
}

impl Default for ServingSection {
    fn default() -> Self {
        Self {
            trace: None,
            time_scale: 1.0,
            rate_scale: 1.0,
            ttft_ms: 500.0,
            tpot_ms: 150.0,
            synthetic: SyntheticTrace::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub b0: u64,
    pub g0: u64,
    pub mode: StepMode,
    pub success_prob: f64,
    pub max_groups: u64,
    pub shape: TrajectoryShape,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            b0: 16,
            g0: 8,
            mode: StepMode::FixedBatch,
            success_prob: 0.5,
            max_groups: 256,
            shape: TrajectoryShape::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    /// KV pages per serving GPU.
    pub total_pages: u32,
    /// KV pages per dedicated rollout GPU.
    pub dedicated_pages: u32,
    pub page_size: u64,
    pub headroom_fraction: f64,
    pub watermark_into_headroom: f64,
    pub cut_factor: u32,
    pub lease_s: f64,
    pub lease_refresh: bool,
    pub prefix_caching: bool,
    pub policy: MemoryPolicy,
    pub serving_tokens_per_page: u64,
    pub rollout_tokens_per_page: u64,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            total_pages: 4096,
            dedicated_pages: 16384,
            page_size: crate::kvc::DEFAULT_PAGE_SIZE,
            headroom_fraction: 0.2,
            watermark_into_headroom: 0.5,
            cut_factor: 2,
            lease_s: 10.0,
            lease_refresh: true,
            prefix_caching: true,
            policy: MemoryPolicy::Preemptive,
            serving_tokens_per_page: 16,
            rollout_tokens_per_page: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepSection {
    pub training_s: f64,
    pub intra_sync_s: f64,
    /// Cross-cluster weight push; hidden behind the next rollout when it fits.
    pub cross_sync_s: f64,
}

impl Default for StepSection {
    fn default() -> Self {
        Self { training_s: 30.0, intra_sync_s: 2.0, cross_sync_s: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailureSection {
    pub enabled: bool,
    /// Mean time between failures per dedicated GPU.
    pub mtbf_s: f64,
    pub mttr_s: f64,
}

impl Default for FailureSection {
    fn default() -> Self {
        Self { enabled: false, mtbf_s: 600.0, mttr_s: 30.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfilesSection {
    /// Latency profile TOML; the bundled set when absent.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub sim: SimSection,
    pub cluster: ClusterSection,
    pub serving: ServingSection,
    pub rollout: RolloutSection,
    pub executor: ExecConfig,
    pub memory: MemorySection,
    pub scheduler: SchedConfig,
    pub step: StepSection,
    pub failures: FailureSection,
    pub profiles: ProfilesSection,
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        let cfg: SimConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            ConfigError::Schema { path: e.path().to_string(), message: e.inner().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.cluster;
        if c.dedicated_gpus + c.serving_gpus == 0 {
            return Err(invalid("cluster", "no GPUs"));
        }
        if c.dedicated_gpus == 0 && c.borrow_cap == 0 {
            return Err(invalid("cluster.borrow_cap", "no GPU can run rollouts"));
        }
        if c.pd_disaggregated && c.serving_gpus > 0 && (c.prefillers == 0 || c.prefillers >= c.serving_gpus) {
            return Err(invalid("cluster.prefillers", "need at least one prefiller and one decoder"));
        }
        if c.borrow_cap > c.serving_gpus {
            return Err(invalid("cluster.borrow_cap", "exceeds serving_gpus"));
        }
        if c.activation_s < 0.0 {
            return Err(invalid("cluster.activation_s", "negative"));
        }
        let s = &self.serving;
        if !(s.time_scale > 0.0 && s.rate_scale > 0.0) {
            return Err(invalid("serving", "time_scale and rate_scale must be positive"));
        }
        if !(s.ttft_ms > 0.0 && s.tpot_ms > 0.0) {
            return Err(invalid("serving", "SLO budgets must be positive"));
        }
        let r = &self.rollout;
        if r.b0 == 0 || r.g0 == 0 {
            return Err(invalid("rollout", "b0 and g0 must be at least 1"));
        }
        if r.mode == StepMode::RedundantSampling && !(r.success_prob > 0.0 && r.success_prob <= 1.0) {
            return Err(invalid("rollout.success_prob", "must be in (0, 1]"));
        }
        if r.max_groups < r.b0 {
            return Err(invalid("rollout.max_groups", "must be at least b0"));
        }
        let m = &self.memory;
        if !(0.0..1.0).contains(&m.headroom_fraction) || !(0.0..=1.0).contains(&m.watermark_into_headroom) {
            return Err(invalid("memory", "headroom_fraction in [0, 1) and watermark_into_headroom in [0, 1]"));
        }
        if m.total_pages == 0 || m.dedicated_pages == 0 || m.cut_factor < 2 {
            return Err(invalid("memory", "page counts must be positive and cut_factor >= 2"));
        }
        if m.serving_tokens_per_page == 0 || m.rollout_tokens_per_page == 0 || m.lease_s <= 0.0 {
            return Err(invalid("memory", "tokens_per_page and lease_s must be positive"));
        }
        if self.executor.chunk_tokens == 0 || self.executor.max_decode_batch == 0 {
            return Err(invalid("executor", "chunk_tokens and max_decode_batch must be positive"));
        }
        if self.scheduler.concurrency_cap == 0 || self.scheduler.heartbeat_period == 0 || self.scheduler.heartbeat_k == 0 {
            return Err(invalid("scheduler", "caps and heartbeat settings must be positive"));
        }
        let st = &self.step;
        if st.training_s < 0.0 || st.intra_sync_s < 0.0 || st.cross_sync_s < 0.0 {
            return Err(invalid("step", "negative duration"));
        }
        if self.failures.enabled && !(self.failures.mtbf_s > 0.0 && self.failures.mttr_s > 0.0) {
            return Err(invalid("failures", "mtbf_s and mttr_s must be positive"));
        }
        if self.sim.steps == 0 || self.sim.max_time_s <= 0.0 {
            return Err(invalid("sim", "steps and max_time_s must be positive"));
        }
        Ok(())
    }
}

/// Sets `dotted.key = value` in `table`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let err = |reason: &str| ConfigError::Override { key: key.to_string(), reason: reason.to_string() };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err("empty path segment"));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| err("path crosses a non-table value"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
