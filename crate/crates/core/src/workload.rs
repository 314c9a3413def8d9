//! Serving traces, multi-turn rollout trajectories, group sampling and
//! the RL step timeline.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::cost::LatencyProfile;
use crate::kernel::TrajId;
use crate::time::{secs_f64, Micros, SimTime, MICROS_PER_SEC};

pub const TRACE_SCHEMA: &str = "serving-trace-v1";
pub const TRACE_HEADER: [&str; 3] = ["t_arr_us", "prompt_tokens", "output_tokens"];

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("scale factors must be positive (time_scale={time_scale}, rate_scale={rate_scale})")]
    InvalidScale { time_scale: f64, rate_scale: f64 },
    #[error("invalid workload parameter: {0}")]
    InvalidParam(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn parse_err(line: u64, reason: impl Into<String>) -> WorkloadError {
    WorkloadError::Parse { line, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServingTraceRecord {
    pub t_arr: SimTime,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

/// Parses the trace CSV: an optional `#schema=` row, the column header,
/// then records sorted by arrival with positive token counts.
pub fn parse_trace<R: Read>(reader: R) -> Result<Vec<ServingTraceRecord>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut out: Vec<ServingTraceRecord> = Vec::new();
    let mut saw_header = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if !saw_header {
            let cols: Vec<&str> = rec.iter().collect();
            if cols != TRACE_HEADER {
                return Err(parse_err(line, format!("expected header {}", TRACE_HEADER.join(","))));
            }
            saw_header = true;
            continue;
        }
        if rec.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, found {}", rec.len())));
        }
        let field = |i: usize| -> Result<u64, WorkloadError> {
            rec[i]
                .parse::<u64>()
                .map_err(|e| parse_err(line, format!("{}: {e}", TRACE_HEADER[i])))
        };
        let r = ServingTraceRecord {
            t_arr: field(0)?,
            prompt_tokens: field(1)?,
            output_tokens: field(2)?,
        };
        if r.prompt_tokens == 0 || r.output_tokens == 0 {
            return Err(parse_err(line, "token counts must be positive"));
        }
        if out.last().is_some_and(|p| p.t_arr > r.t_arr) {
            return Err(parse_err(line, "records not sorted by t_arr_us"));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_trace<W: Write>(mut w: W, records: &[ServingTraceRecord]) -> std::io::Result<()> {
    writeln!(w, "#schema={TRACE_SCHEMA}")?;
    writeln!(w, "{}", TRACE_HEADER.join(","))?;
    for r in records {
        writeln!(w, "{},{},{}", r.t_arr, r.prompt_tokens, r.output_tokens)?;
    }
    Ok(())
}

/// Applies time and rate scaling. Each record is kept `floor(rate_scale)`
/// times plus once more with probability `frac(rate_scale)`.
pub fn scale_trace(
    records: &[ServingTraceRecord],
    time_scale: f64,
    rate_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ServingTraceRecord>, WorkloadError> {
    if !(time_scale > 0.0 && rate_scale > 0.0) {
        return Err(WorkloadError::InvalidScale { time_scale, rate_scale });
    }
    let whole = rate_scale.floor() as u64;
    let frac = rate_scale - rate_scale.floor();
    let mut out = Vec::with_capacity((records.len() as f64 * rate_scale).ceil() as usize);
    for r in records {
        let copies = whole + u64::from(frac > 0.0 && rng.random_bool(frac));
        let t = (r.t_arr as f64 * time_scale).round() as SimTime;
        for _ in 0..copies {
            out.push(ServingTraceRecord { t_arr: t, ..*r });
        }
    }
    Ok(out)
}

pub fn load_serving_trace(
    path: &Path,
    time_scale: f64,
    rate_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ServingTraceRecord>, WorkloadError> {
    let f = std::fs::File::open(path).map_err(|source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let recs = parse_trace(std::io::BufReader::new(f))?;
    scale_trace(&recs, time_scale, rate_scale, rng)
}

/// Converts an Azure-style LLM inference trace
/// (`TIMESTAMP,ContextTokens,GeneratedTokens`) to trace records with
/// arrival offsets relative to the first row.
pub fn convert_azure_trace<R: BufRead>(reader: R) -> Result<Vec<ServingTraceRecord>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| parse_err(1, format!("missing column {name}")))
    };
    let (ti, ci, gi) = (col("TIMESTAMP")?, col("ContextTokens")?, col("GeneratedTokens")?);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let ts = parse_timestamp(&rec[ti]).ok_or_else(|| parse_err(line, format!("bad timestamp {:?}", &rec[ti])))?;
        let num = |i: usize| rec[i].parse::<u64>().map_err(|e| parse_err(line, e.to_string()));
        let (c, g) = (num(ci)?, num(gi)?);
        if c > 0 && g > 0 {
            rows.push((ts, c, g));
        }
    }
    rows.sort_by_key(|r| r.0);
    let t0 = rows.first().map_or(0, |r| r.0);
    Ok(rows
        .into_iter()
        .map(|(t, c, g)| ServingTraceRecord {
            t_arr: (t - t0) as SimTime,
            prompt_tokens: c,
            output_tokens: g,
        })
        .collect())
}

fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    // fractional seconds beyond nanoseconds are truncated by %.f
    chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S%.f")
        .ok()
        .map(|t| t.and_utc().timestamp_micros())
        .or_else(|| s.parse::<f64>().ok().map(|v| (v * MICROS_PER_SEC as f64).round() as i64))
}

/// Bursty synthetic serving traffic: per-second Poisson counts whose rate
/// switches between a base level and `burst_factor` times it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTrace {
    pub mean_rps: f64,
    pub burst_factor: f64,
    /// Fraction of seconds spent in burst state.
    pub burst_fraction: f64,
    pub mean_burst_s: f64,
    pub prompt_median: f64,
    pub prompt_sigma: f64,
    pub prompt_max: u64,
    pub output_median: f64,
    pub output_sigma: f64,
    pub output_max: u64,
}

impl Default for SyntheticTrace {
    fn default() -> Self {
        Self {
            mean_rps: 2.0,
            burst_factor: 3.0,
            burst_fraction: 0.15,
            mean_burst_s: 8.0,
            prompt_median: 700.0,
            prompt_sigma: 0.6,
            prompt_max: 4096,
            output_median: 120.0,
            output_sigma: 0.7,
            output_max: 1024,
        }
    }
}

impl SyntheticTrace {
    pub fn generate(&self, horizon: Micros, rng: &mut ChaCha8Rng) -> Result<Vec<ServingTraceRecord>, WorkloadError> {
        let bad = |m: &str| WorkloadError::InvalidParam(m.to_string());
        if !(self.mean_rps >= 0.0 && self.burst_factor >= 1.0) {
            return Err(bad("mean_rps >= 0 and burst_factor >= 1 required"));
        }
        if !(0.0..1.0).contains(&self.burst_fraction) || self.mean_burst_s <= 0.0 {
            return Err(bad("burst_fraction in [0, 1) and mean_burst_s > 0 required"));
        }
        let prompt = LogNormal::new(self.prompt_median.max(1.0).ln(), self.prompt_sigma).map_err(|e| bad(&e.to_string()))?;
        let output = LogNormal::new(self.output_median.max(1.0).ln(), self.output_sigma).map_err(|e| bad(&e.to_string()))?;
        // rates chosen so the long-run mean equals mean_rps
        let f = self.burst_fraction;
        let base = self.mean_rps / (1.0 - f + f * self.burst_factor);
        let p_exit = 1.0 / self.mean_burst_s;
        let p_enter = if f > 0.0 { p_exit * f / (1.0 - f) } else { 0.0 };
        let mut burst = false;
        let mut out = Vec::new();
        let seconds = horizon.div_ceil(MICROS_PER_SEC);
        for s in 0..seconds {
            burst = if burst { !rng.random_bool(p_exit.min(1.0)) } else { rng.random_bool(p_enter.min(1.0)) };
            let rate = if burst { base * self.burst_factor } else { base };
            let n = poisson(rate, rng);
            let mut offs: Vec<u64> = (0..n).map(|_| rng.random_range(0..MICROS_PER_SEC)).collect();
            offs.sort_unstable();
            for o in offs {
                let t = s * MICROS_PER_SEC + o;
                if t >= horizon {
                    break;
                }
                out.push(ServingTraceRecord {
                    t_arr: t,
                    prompt_tokens: (prompt.sample(rng).round() as u64).clamp(16, self.prompt_max),
                    output_tokens: (output.sample(rng).round() as u64).clamp(2, self.output_max),
                });
            }
        }
        Ok(out)
    }
}

fn poisson(rate: f64, rng: &mut ChaCha8Rng) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    rand_distr::Poisson::new(rate).map_or(0, |d| d.sample(rng) as u64)
}

/// Peak over mean of per-second arrival counts across the trace span.
pub fn peak_to_mean(records: &[ServingTraceRecord]) -> f64 {
    let Some(last) = records.last() else { return 0.0 };
    let bins = (last.t_arr / MICROS_PER_SEC + 1) as usize;
    let mut counts = vec![0u64; bins];
    for r in records {
        counts[(r.t_arr / MICROS_PER_SEC) as usize] += 1;
    }
    let mean = records.len() as f64 / bins as f64;
    *counts.iter().max().unwrap() as f64 / mean
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSpec {
    /// Environment interaction time before this turn's prompt is ready.
    pub env_delay: Micros,
    pub prompt_tokens: u64,
    pub decode_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub id: TrajId,
    pub group_id: u64,
    pub turns: Vec<TurnSpec>,
}

impl TrajectorySpec {
    pub fn prompt_tokens(&self) -> u64 {
        self.turns.iter().map(|t| t.prompt_tokens).sum()
    }

    pub fn decode_tokens(&self) -> u64 {
        self.turns.iter().map(|t| t.decode_tokens).sum()
    }

    /// Context accumulated before turn `i`.
    pub fn context_before(&self, i: usize) -> u64 {
        self.turns[..i].iter().map(|t| t.prompt_tokens + t.decode_tokens).sum()
    }
}

/// Distribution parameters of generated trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryShape {
    /// Turn count is `1 + Geometric(1 - continue_p)`, capped at `max_turns`.
    pub continue_p: f64,
    pub max_turns: u32,
    pub initial_prompt_median: f64,
    pub initial_prompt_sigma: f64,
    pub feedback_median: f64,
    pub feedback_sigma: f64,
    pub decode_median: f64,
    pub decode_sigma: f64,
    pub env_delay_mean_s: f64,
    pub env_delay_max_s: f64,
}

impl Default for TrajectoryShape {
    fn default() -> Self {
        Self {
            continue_p: 0.85,
            max_turns: 40,
            initial_prompt_median: 800.0,
            initial_prompt_sigma: 0.3,
            feedback_median: 330.0,
            feedback_sigma: 0.6,
            decode_median: 70.0,
            decode_sigma: 0.85,
            env_delay_mean_s: 8.0,
            env_delay_max_s: 30.0,
        }
    }
}

/// Generates `b0 * g0` trajectories; trajectory `k` of group `g` gets id
/// `first_id + g * g0 + k`.
pub fn generate_trajectories(
    shape: &TrajectoryShape,
    b0: u64,
    g0: u64,
    first_group: u64,
    first_id: TrajId,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrajectorySpec>, WorkloadError> {
    let bad = |m: String| WorkloadError::InvalidParam(m);
    if b0 == 0 || g0 == 0 {
        return Err(bad("B0 and G0 must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&shape.continue_p) || shape.max_turns == 0 {
        return Err(bad("continue_p in [0, 1) and max_turns >= 1 required".into()));
    }
    if shape.env_delay_mean_s <= 0.0 {
        return Err(bad("env_delay_mean_s must be positive".into()));
    }
    let ln = |m: f64, s: f64| LogNormal::new(m.max(1.0).ln(), s).map_err(|e| bad(e.to_string()));
    let initial = ln(shape.initial_prompt_median, shape.initial_prompt_sigma)?;
    let feedback = ln(shape.feedback_median, shape.feedback_sigma)?;
    let decode = ln(shape.decode_median, shape.decode_sigma)?;
    let env = Exp::new(1.0 / shape.env_delay_mean_s).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::with_capacity((b0 * g0) as usize);
    for g in 0..b0 {
        for k in 0..g0 {
            let mut turns = Vec::new();
            let mut n = 1;
            while n < shape.max_turns && rng.random_bool(shape.continue_p) {
                n += 1;
            }
            for i in 0..n {
                let prompt = if i == 0 { initial.sample(rng) } else { feedback.sample(rng) };
                let delay = if i == 0 { 0.0 } else { env.sample(rng).min(shape.env_delay_max_s) };
                turns.push(TurnSpec {
                    env_delay: secs_f64(delay),
                    prompt_tokens: (prompt.round() as u64).max(1),
                    decode_tokens: (decode.sample(rng).round() as u64).clamp(1, 4096),
                });
            }
            out.push(TrajectorySpec {
                id: first_id + g * g0 + k,
                group_id: first_group + g,
                turns,
            });
        }
    }
    Ok(out)
}

/// Prompt tokens over all tokens of a batch (initial prompt plus feedback
/// count as prefill; generated tokens as decode).
pub fn prefill_share(specs: &[TrajectorySpec]) -> f64 {
    let p: u64 = specs.iter().map(|s| s.prompt_tokens()).sum();
    let d: u64 = specs.iter().map(|s| s.decode_tokens()).sum();
    p as f64 / (p + d).max(1) as f64
}

/// Isolated service time of one trajectory under the cost model:
/// incremental chunked prefill, unbatched decode and environment delays.
pub fn service_time(spec: &TrajectorySpec, profile: &LatencyProfile, chunk_tokens: u32) -> Micros {
    let mut total = 0;
    let mut ctx = 0;
    for t in &spec.turns {
        total += t.env_delay;
        let target = ctx + t.prompt_tokens;
        let mut start = ctx;
        while start < target {
            let end = (start + chunk_tokens as u64).min(target);
            total += profile.chunk_cost(chunk_tokens, start, end).expect("chunk table");
            start = end;
        }
        total += t.decode_tokens * profile.decode_step_latency(1).expect("decode table");
        ctx = target + t.decode_tokens;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    /// Launch `B0` groups; every group counts.
    #[default]
    FixedBatch,
    /// Keep launching until `B0` groups pass the reward-variance filter.
    RedundantSampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub step_index: u32,
    pub mode: StepMode,
    pub b0: u64,
    pub g0: u64,
    pub success_prob: f64,
    /// Hard cap on launched groups (redundant sampling).
    pub max_groups: u64,
}

/// Group-level launch policy of one step. Redundant sampling keeps
/// `B0 - accepted` groups in flight, so launches form a negative-binomial
/// trial sequence with mean `B0 / p`.
#[derive(Debug, Clone)]
pub struct GroupSampler {
    plan: StepPlan,
    launched: u64,
    completed: u64,
    accepted: u64,
}

impl GroupSampler {
    pub fn new(plan: StepPlan) -> Result<Self, WorkloadError> {
        if plan.b0 == 0 || plan.g0 == 0 {
            return Err(WorkloadError::InvalidParam("B0 and G0 must be at least 1".into()));
        }
        if plan.mode == StepMode::RedundantSampling && !(plan.success_prob > 0.0 && plan.success_prob <= 1.0) {
            return Err(WorkloadError::InvalidParam("success probability must be in (0, 1]".into()));
        }
        if plan.max_groups < plan.b0 {
            return Err(WorkloadError::InvalidParam("max_groups must be at least B0".into()));
        }
        Ok(Self { plan, launched: 0, completed: 0, accepted: 0 })
    }

    pub fn plan(&self) -> &StepPlan {
        &self.plan
    }

    pub fn launched(&self) -> u64 {
        self.launched
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn in_flight(&self) -> u64 {
        self.launched - self.completed
    }

    /// Groups to launch now so in-flight matches the target.
    pub fn to_launch(&mut self) -> u64 {
        let target = match self.plan.mode {
            StepMode::FixedBatch => self.plan.b0.saturating_sub(self.launched),
            StepMode::RedundantSampling => {
                let want = self.plan.b0.saturating_sub(self.accepted).saturating_sub(self.in_flight());
                want.min(self.plan.max_groups - self.launched)
            }
        };
        self.launched += target;
        target
    }

    /// Records a finished group; the reward oracle decides acceptance.
    pub fn on_group_complete(&mut self, rng: &mut ChaCha8Rng) -> bool {
        debug_assert!(self.in_flight() > 0);
        self.completed += 1;
        let ok = match self.plan.mode {
            StepMode::FixedBatch => true,
            StepMode::RedundantSampling => {
                self.plan.success_prob >= 1.0 || rng.random_bool(self.plan.success_prob)
            }
        };
        if ok {
            self.accepted += 1;
        }
        ok
    }

    /// All launched groups resolved and nothing more to launch.
    pub fn is_done(&self) -> bool {
        let exhausted = match self.plan.mode {
            StepMode::FixedBatch => self.launched >= self.plan.b0,
            StepMode::RedundantSampling => self.accepted >= self.plan.b0 || self.launched >= self.plan.max_groups,
        };
        exhausted && self.in_flight() == 0
    }
}

/// Launch count of one step with groups resolving one at a time.
pub fn simulate_group_launches(plan: &StepPlan, rng: &mut ChaCha8Rng) -> Result<u64, WorkloadError> {
    let mut s = GroupSampler::new(plan.clone())?;
    s.to_launch();
    while !s.is_done() {
        s.on_group_complete(rng);
        s.to_launch();
    }
    Ok(s.launched())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTimeline {
    pub rollout: Micros,
    pub training: Micros,
    pub intra_sync: Micros,
    pub cross_sync: Micros,
    pub overlap_window: Micros,
}

impl StepTimeline {
    /// Cross-cluster sync time not hidden behind the overlap window.
    pub fn exposed_sync(&self) -> Micros {
        self.cross_sync.saturating_sub(self.overlap_window)
    }

    pub fn step_time(&self) -> Micros {
        self.rollout + self.training + self.intra_sync + self.exposed_sync()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::ProfileSet;
    use crate::time::secs;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn parse_and_identity_scale() {
        let text = "#schema=serving-trace-v1\nt_arr_us,prompt_tokens,output_tokens\n0,100,10\n500,200,20\n500,50,5\n";
        let recs = parse_trace(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        let scaled = scale_trace(&recs, 1.0, 1.0, &mut rng(1)).unwrap();
        assert_eq!(scaled, recs);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "t_arr_us,prompt_tokens,output_tokens\n0,100,10\n5,x,1\n";
        match parse_trace(text.as_bytes()) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let unsorted = "t_arr_us,prompt_tokens,output_tokens\n10,1,1\n5,1,1\n";
        assert!(matches!(parse_trace(unsorted.as_bytes()), Err(WorkloadError::Parse { line: 3, .. })));
        let zero = "t_arr_us,prompt_tokens,output_tokens\n10,0,1\n";
        assert!(parse_trace(zero.as_bytes()).is_err());
        assert!(parse_trace("a,b,c\n".as_bytes()).is_err());
    }

    #[test]
    fn empty_trace() {
        assert!(parse_trace("".as_bytes()).unwrap().is_empty());
        assert!(parse_trace("t_arr_us,prompt_tokens,output_tokens\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn rate_scale_two_doubles() {
        let recs: Vec<_> = (0..50)
            .map(|i| ServingTraceRecord { t_arr: i * 10, prompt_tokens: 5, output_tokens: 5 })
            .collect();
        assert_eq!(scale_trace(&recs, 1.0, 2.0, &mut rng(3)).unwrap().len(), 100);
        let half = scale_trace(&recs, 1.0, 0.5, &mut rng(3)).unwrap();
        assert!(half.len() > 10 && half.len() < 40);
        assert!(scale_trace(&recs, 0.0, 1.0, &mut rng(3)).is_err());
    }

    #[test]
    fn time_scale_preserves_order_and_gaps() {
        let recs: Vec<_> = [0u64, 7, 7, 30]
            .iter()
            .map(|&t| ServingTraceRecord { t_arr: t, prompt_tokens: 1, output_tokens: 1 })
            .collect();
        let s = scale_trace(&recs, 2.0, 1.0, &mut rng(0)).unwrap();
        let ts: Vec<_> = s.iter().map(|r| r.t_arr).collect();
        assert_eq!(ts, vec![0, 14, 14, 60]);
    }

    #[test]
    fn write_parse_round_trip() {
        let recs = SyntheticTrace::default().generate(secs(120), &mut rng(9)).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &recs).unwrap();
        assert_eq!(parse_trace(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn synthetic_trace_is_bursty_and_reproducible() {
        let p = SyntheticTrace::default();
        let a = p.generate(secs(3600), &mut rng(5)).unwrap();
        let b = p.generate(secs(3600), &mut rng(5)).unwrap();
        assert_eq!(a, b);
        let mean = a.len() as f64 / 3600.0;
        assert!((mean - 2.0).abs() < 0.2, "mean rps {mean}");
        assert!(peak_to_mean(&a) >= 1.5);
    }

    #[test]
    fn azure_conversion() {
        let text = "TIMESTAMP,ContextTokens,GeneratedTokens\n\
                    2023-11-16 18:15:46.6805900,374,44\n\
                    2023-11-16 18:15:50.9951690,396,109\n\
                    2023-11-16 18:15:51.0000000,0,10\n";
        let recs = convert_azure_trace(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0], ServingTraceRecord { t_arr: 0, prompt_tokens: 374, output_tokens: 44 });
        assert_eq!(recs[1].t_arr, 4_314_579);
    }

    #[test]
    fn counts_and_groups() {
        let specs = generate_trajectories(&TrajectoryShape::default(), 4, 2, 0, 0, &mut rng(1)).unwrap();
        assert_eq!(specs.len(), 8);
        let mut groups: Vec<u64> = specs.iter().map(|s| s.group_id).collect();
        groups.dedup();
        assert_eq!(groups, vec![0, 1, 2, 3]);
        assert!(generate_trajectories(&TrajectoryShape::default(), 0, 2, 0, 0, &mut rng(1)).is_err());
    }

    #[test]
    fn same_seed_same_specs() {
        let s = TrajectoryShape::default();
        assert_eq!(
            generate_trajectories(&s, 8, 8, 0, 0, &mut rng(42)).unwrap(),
            generate_trajectories(&s, 8, 8, 0, 0, &mut rng(42)).unwrap()
        );
    }

    #[test]
    fn calibrated_shape_statistics() {
        let profile = ProfileSet::bundled().get("qwen3-8b", "h800").unwrap().clone();
        for seed in 0..5 {
            let specs = generate_trajectories(&TrajectoryShape::default(), 128, 8, 0, 0, &mut rng(seed)).unwrap();
            assert_eq!(specs.len(), 1024);
            let share = prefill_share(&specs);
            assert!((0.7..=0.9).contains(&share), "prefill share {share}");
            let mut t: Vec<u64> = specs.iter().map(|s| service_time(s, &profile, 512)).collect();
            t.sort_unstable();
            let p75 = crate::metrics::percentile_sorted(&t, 75.0).unwrap();
            let max = *t.last().unwrap();
            assert!(p75 as f64 <= 0.3 * max as f64, "p75 {p75} max {max}");
            let delays: Vec<u64> = specs.iter().flat_map(|s| s.turns.iter().skip(1).map(|t| t.env_delay)).collect();
            let mean = delays.iter().sum::<u64>() as f64 / delays.len() as f64;
            assert!(mean <= secs(10) as f64, "mean env delay {mean}");
            assert!(delays.iter().all(|&d| d <= secs(30)));
        }
    }

    fn plan(mode: StepMode, p: f64) -> StepPlan {
        StepPlan { step_index: 0, mode, b0: 8, g0: 4, success_prob: p, max_groups: 128 }
    }

    #[test]
    fn sampler_p1_matches_fixed() {
        let a = simulate_group_launches(&plan(StepMode::RedundantSampling, 1.0), &mut rng(1)).unwrap();
        let b = simulate_group_launches(&plan(StepMode::FixedBatch, 0.5), &mut rng(1)).unwrap();
        assert_eq!((a, b), (8, 8));
    }

    #[test]
    fn negative_binomial_mean() {
        // oracle: E[launches] = B0 / p for a negative binomial trial count
        let p = plan(StepMode::RedundantSampling, 0.25);
        let mut r = rng(11);
        let n = 4000;
        let total: u64 = (0..n).map(|_| simulate_group_launches(&p, &mut r).unwrap()).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 32.0).abs() < 1.0, "mean {mean}");
        for _ in 0..200 {
            let l = simulate_group_launches(&p, &mut r).unwrap();
            assert!((8..=128).contains(&l));
        }
    }

    #[test]
    fn sampler_respects_cap() {
        let mut p = plan(StepMode::RedundantSampling, 0.01);
        p.max_groups = 10;
        assert_eq!(simulate_group_launches(&p, &mut rng(2)).unwrap(), 10);
        assert!(GroupSampler::new(plan(StepMode::RedundantSampling, 0.0)).is_err());
    }

    #[test]
    fn timeline_cases() {
        let t = StepTimeline { rollout: secs(300), training: secs(60), intra_sync: secs(5), cross_sync: secs(20), overlap_window: secs(300) };
        assert_eq!(t.exposed_sync(), 0);
        assert_eq!(t.step_time(), secs(365));
        let t = StepTimeline { rollout: secs(100), training: 0, intra_sync: 0, cross_sync: secs(200), overlap_window: secs(100) };
        assert_eq!(t.exposed_sync(), secs(100));
        assert_eq!(t.step_time(), secs(200));
    }
}
