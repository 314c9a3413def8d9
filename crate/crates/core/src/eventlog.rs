//! JSON-lines event log. Every CSV row the simulator emits can be rebuilt
//! from the log alone; [`Replay`] does exactly that for verification.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::kernel::{GpuId, TrajId};
use crate::metrics::{slo_report, AllocationOverhead, LatencySample, RunSummary, SloConfig, StepMetrics};
use crate::time::{to_secs, Micros, SimTime};

pub const EVENTLOG_SCHEMA: &str = "eventlog-v1";

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("log does not start with a run record of schema {EVENTLOG_SCHEMA}")]
    MissingHeader,
    #[error("log has no run-end record")]
    Truncated,
    #[error("record for step {0} outside a started step")]
    OrphanStep(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "k", rename_all = "snake_case")]
pub enum LogRecord {
    Run {
        schema: String,
        scenario: String,
        variant: String,
        seed: u64,
        gpus: u32,
        activation_us: Micros,
        ttft_budget_us: Micros,
        tpot_budget_us: Micros,
    },
    Request { id: u64, t_arr: SimTime, ttft: Micros, gaps: Vec<Micros> },
    StepStart { step: u32, t: SimTime, borrowed: Vec<GpuId> },
    GroupLaunch { step: u32, t: SimTime, group: u64, trajs: u64 },
    Turn {
        step: u32,
        t: SimTime,
        gpu: GpuId,
        traj: TrajId,
        turn: u32,
        prompt: u64,
        decode: u64,
        cached: u64,
        computed: u64,
        last: bool,
    },
    Lost { step: u32, t: SimTime, gpu: GpuId, traj: TrajId, turn: u32, stalled: bool, dropped: bool },
    GroupDone { step: u32, t: SimTime, group: u64, accepted: bool },
    RolloutEnd { step: u32, t: SimTime },
    StepEnd { step: u32, t: SimTime, training: Micros, intra_sync: Micros, exposed_sync: Micros },
    Failure { t: SimTime, gpu: GpuId },
    Recovery { t: SimTime, gpu: GpuId },
    RunEnd {
        t: SimTime,
        events: u64,
        admission_violations: u64,
        emergency_cuts: u64,
        stalls: u64,
        prefix_hit_turns: u64,
    },
}

/// Hashing line writer. The digest covers exactly the bytes written.
pub struct EventLog {
    sink: Option<Box<dyn Write>>,
    hasher: Sha256,
    records: u64,
    keep: Option<Vec<LogRecord>>,
}

impl EventLog {
    /// Digest only.
    pub fn discard() -> Self {
        Self { sink: None, hasher: Sha256::new(), records: 0, keep: None }
    }

    pub fn to_writer(w: Box<dyn Write>) -> Self {
        Self { sink: Some(w), hasher: Sha256::new(), records: 0, keep: None }
    }

    /// Also retains the records in memory.
    pub fn retaining(mut self) -> Self {
        self.keep = Some(Vec::new());
        self
    }

    pub fn write(&mut self, rec: LogRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(&rec).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.hasher.update(&line);
        if let Some(s) = self.sink.as_mut() {
            s.write_all(&line)?;
        }
        if let Some(k) = self.keep.as_mut() {
            k.push(rec);
        }
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn retained(&self) -> Option<&[LogRecord]> {
        self.keep.as_deref()
    }

    /// Flushes the sink and returns the hex digest.
    pub fn finish(mut self) -> std::io::Result<(String, Option<Vec<LogRecord>>)> {
        if let Some(s) = self.sink.as_mut() {
            s.flush()?;
        }
        Ok((hex(&self.hasher.finalize()), self.keep))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogRecord>, LogError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| LogError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

/// Metrics rebuilt from log records.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub scenario: String,
    pub variant: String,
    pub seed: u64,
    pub gpus: u32,
    pub activation: Micros,
    pub slo: SloConfig,
    pub samples: Vec<LatencySample>,
    pub steps: Vec<StepMetrics>,
    pub end: SimTime,
    pub events: u64,
    pub admission_violations: u64,
    pub emergency_cuts: u64,
    pub stalls: u64,
    pub prefix_hit_turns: u64,
    pub turns: u64,
    pub dropped: u64,
}

fn step_mut(steps: &mut BTreeMap<u32, StepMetrics>, s: u32) -> Result<&mut StepMetrics, LogError> {
    steps.get_mut(&s).ok_or(LogError::OrphanStep(s))
}

impl Replay {
    pub fn from_records(records: &[LogRecord]) -> Result<Self, LogError> {
        let Some(LogRecord::Run { schema, scenario, variant, seed, gpus, activation_us, ttft_budget_us, tpot_budget_us }) =
            records.first()
        else {
            return Err(LogError::MissingHeader);
        };
        if schema != EVENTLOG_SCHEMA {
            return Err(LogError::MissingHeader);
        }
        let mut r = Replay {
            scenario: scenario.clone(),
            variant: variant.clone(),
            seed: *seed,
            gpus: *gpus,
            activation: *activation_us,
            slo: SloConfig { ttft: *ttft_budget_us, tpot: *tpot_budget_us },
            samples: Vec::new(),
            steps: Vec::new(),
            end: 0,
            events: 0,
            admission_violations: 0,
            emergency_cuts: 0,
            stalls: 0,
            prefix_hit_turns: 0,
            turns: 0,
            dropped: 0,
        };
        let mut steps: BTreeMap<u32, StepMetrics> = BTreeMap::new();
        let mut ended = false;
        for rec in &records[1..] {
            match rec {
                LogRecord::Run { .. } => return Err(LogError::MissingHeader),
                LogRecord::Request { id, t_arr, ttft, gaps } => r.samples.push(LatencySample {
                    request_id: *id,
                    t_arr: *t_arr,
                    ttft: *ttft,
                    tpot: gaps.clone(),
                }),
                LogRecord::StepStart { step, t, borrowed } => {
                    steps.insert(
                        *step,
                        StepMetrics { step: *step, start: *t, borrowed_gpus: borrowed.len() as u32, ..Default::default() },
                    );
                }
                LogRecord::GroupLaunch { step, trajs, .. } => {
                    let m = step_mut(&mut steps, *step)?;
                    m.groups_launched += 1;
                    m.trajectories_launched += trajs;
                }
                LogRecord::Turn { step, prompt, decode, last, .. } => {
                    let m = step_mut(&mut steps, *step)?;
                    m.tokens_in += prompt;
                    m.tokens_out += decode;
                    m.trajectories_done += u64::from(*last);
                    r.turns += 1;
                }
                LogRecord::Lost { step, dropped, .. } => {
                    let m = step_mut(&mut steps, *step)?;
                    if *dropped {
                        m.trajectories_dropped += 1;
                        r.dropped += 1;
                    } else {
                        m.reroutes += 1;
                    }
                }
                LogRecord::GroupDone { step, accepted, .. } => {
                    step_mut(&mut steps, *step)?.groups_accepted += u64::from(*accepted);
                }
                LogRecord::RolloutEnd { step, t } => {
                    let m = step_mut(&mut steps, *step)?;
                    m.rollout_time = t - m.start;
                }
                LogRecord::StepEnd { step, t, .. } => {
                    let m = step_mut(&mut steps, *step)?;
                    m.step_time = t - m.start;
                }
                LogRecord::Failure { .. } | LogRecord::Recovery { .. } => {}
                LogRecord::RunEnd { t, events, admission_violations, emergency_cuts, stalls, prefix_hit_turns } => {
                    r.end = *t;
                    r.events = *events;
                    r.admission_violations = *admission_violations;
                    r.emergency_cuts = *emergency_cuts;
                    r.stalls = *stalls;
                    r.prefix_hit_turns = *prefix_hit_turns;
                    ended = true;
                }
            }
        }
        if !ended {
            return Err(LogError::Truncated);
        }
        // only steps whose timeline completed count
        r.steps = steps.into_values().filter(|s| s.step_time > 0).collect();
        r.samples.sort_by_key(|s| s.request_id);
        Ok(r)
    }

    pub fn summary(&self, log_digest: &str) -> RunSummary {
        let rep = slo_report(&self.samples, self.slo);
        let n = self.steps.len().max(1) as f64;
        let overhead = AllocationOverhead::from_steps(&self.steps, self.activation, self.gpus, self.end);
        RunSummary {
            scenario: self.scenario.clone(),
            variant: self.variant.clone(),
            seed: self.seed,
            steps: self.steps.len() as u32,
            requests: self.samples.len(),
            p99_ttft_us: rep.p99_ttft,
            p99_tpot_us: rep.p99_tpot,
            slo_violated: rep.violated,
            mean_rollout_s: self.steps.iter().map(|s| to_secs(s.rollout_time)).sum::<f64>() / n,
            mean_step_s: self.steps.iter().map(|s| to_secs(s.step_time)).sum::<f64>() / n,
            mean_throughput: self.steps.iter().map(|s| s.throughput()).sum::<f64>() / n,
            allocation_overhead: overhead.ratio(),
            admission_violations: self.admission_violations,
            emergency_cuts: self.emergency_cuts,
            stalls: self.stalls,
            dropped: self.dropped,
            prefix_hit_turns: self.prefix_hit_turns,
            turns: self.turns,
            events: self.events,
            log_digest: log_digest.to_string(),
        }
    }
}
