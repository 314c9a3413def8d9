//! Latency percentiles, SLO compliance, per-step accounting and the CSV
//! tables written by a simulation run.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::time::{to_secs, Micros, SimTime};

pub const REQUESTS_SCHEMA: &str = "requests-v1";
pub const STEPS_SCHEMA: &str = "steps-v1";
pub const SUMMARY_SCHEMA: &str = "summary-v1";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("percentile of an empty sample set")]
    EmptySamples,
    #[error("percentile {0} outside (0, 100]")]
    InvalidPercentile(f64),
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for MetricsError {
    fn from(e: csv::Error) -> Self {
        MetricsError::Csv(e.to_string())
    }
}

/// 1-based nearest rank `ceil(p/100 * n)`, clamped to `[1, n]`.
pub fn nearest_rank(n: usize, p: f64) -> Result<usize, MetricsError> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(MetricsError::InvalidPercentile(p));
    }
    if n == 0 {
        return Err(MetricsError::EmptySamples);
    }
    // tolerate representation error in p*n/100 landing just above an integer
    let rank = (p * n as f64 / 100.0 - 1e-9).ceil() as usize;
    Ok(rank.clamp(1, n))
}

/// Nearest-rank percentile (no interpolation).
pub fn percentile<T: Copy + Ord>(samples: &[T], p: f64) -> Result<T, MetricsError> {
    let rank = nearest_rank(samples.len(), p)?;
    let mut v = samples.to_vec();
    let (_, x, _) = v.select_nth_unstable(rank - 1);
    Ok(*x)
}

/// Same as [`percentile`] for an already sorted slice.
pub fn percentile_sorted<T: Copy>(sorted: &[T], p: f64) -> Result<T, MetricsError> {
    let rank = nearest_rank(sorted.len(), p)?;
    Ok(sorted[rank - 1])
}

/// Latency record of one completed serving request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub request_id: u64,
    pub t_arr: SimTime,
    pub ttft: Micros,
    /// Gaps between consecutive output tokens; each strictly positive.
    pub tpot: Vec<Micros>,
}

impl LatencySample {
    pub fn mean_tpot(&self) -> Option<f64> {
        (!self.tpot.is_empty()).then(|| self.tpot.iter().sum::<u64>() as f64 / self.tpot.len() as f64)
    }

    /// `(t_last - t_first) / (tokens - 1)`, floored; `None` for one token.
    pub fn request_tpot(&self) -> Option<Micros> {
        (!self.tpot.is_empty()).then(|| self.tpot.iter().sum::<u64>() / self.tpot.len() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SloConfig {
    pub ttft: Micros,
    pub tpot: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SloReport {
    pub requests: usize,
    pub p99_ttft: Micros,
    pub p99_tpot: Micros,
    pub violated: bool,
}

/// P99 TTFT over requests and P99 of per-request TPOT over requests with
/// at least two tokens. Violated iff either strictly exceeds its budget.
pub fn slo_report(samples: &[LatencySample], slo: SloConfig) -> SloReport {
    let ttft: Vec<Micros> = samples.iter().map(|s| s.ttft).collect();
    let tpot: Vec<Micros> = samples.iter().filter_map(LatencySample::request_tpot).collect();
    let p99_ttft = percentile(&ttft, 99.0).unwrap_or(0);
    let p99_tpot = percentile(&tpot, 99.0).unwrap_or(0);
    SloReport {
        requests: samples.len(),
        p99_ttft,
        p99_tpot,
        violated: p99_ttft > slo.ttft || p99_tpot > slo.tpot,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u32,
    pub start: SimTime,
    pub rollout_time: Micros,
    pub step_time: Micros,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub trajectories_launched: u64,
    pub trajectories_done: u64,
    pub trajectories_dropped: u64,
    pub reroutes: u64,
    pub groups_launched: u64,
    pub groups_accepted: u64,
    pub borrowed_gpus: u32,
}

impl StepMetrics {
    /// Tokens processed per second of step time.
    pub fn throughput(&self) -> f64 {
        if self.step_time == 0 {
            return 0.0;
        }
        (self.tokens_in + self.tokens_out) as f64 / to_secs(self.step_time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationOverhead {
    pub preempted_gpu_time: Micros,
    pub total_gpu_time: Micros,
}

impl AllocationOverhead {
    /// Sums `borrowed × recovery` over steps against `gpus × span`.
    pub fn from_steps(steps: &[StepMetrics], recovery: Micros, gpus: u32, span: Micros) -> Self {
        let preempted = steps.iter().map(|s| s.borrowed_gpus as u64 * recovery).sum();
        Self {
            preempted_gpu_time: preempted,
            total_gpu_time: gpus as u64 * span,
        }
    }

    pub fn ratio(&self) -> f64 {
        if self.total_gpu_time == 0 {
            return 0.0;
        }
        (self.preempted_gpu_time as f64 / self.total_gpu_time as f64).clamp(0.0, 1.0)
    }
}

/// Aggregates of one run; the `summary.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub variant: String,
    pub seed: u64,
    pub steps: u32,
    pub requests: usize,
    pub p99_ttft_us: Micros,
    pub p99_tpot_us: Micros,
    pub slo_violated: bool,
    pub mean_rollout_s: f64,
    pub mean_step_s: f64,
    pub mean_throughput: f64,
    pub allocation_overhead: f64,
    pub admission_violations: u64,
    pub emergency_cuts: u64,
    pub stalls: u64,
    pub dropped: u64,
    pub prefix_hit_turns: u64,
    pub turns: u64,
    pub events: u64,
    pub log_digest: String,
}

fn schema_row<W: Write>(w: &mut W, schema: &str) -> std::io::Result<()> {
    writeln!(w, "#schema={schema}")
}

pub fn write_requests_csv<W: Write>(mut w: W, samples: &[LatencySample]) -> Result<(), MetricsError> {
    schema_row(&mut w, REQUESTS_SCHEMA).map_err(|e| MetricsError::Csv(e.to_string()))?;
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["request_id", "t_arr_us", "ttft_us", "tokens", "mean_tpot_us", "max_tpot_us"])?;
    for s in samples {
        c.write_record([
            s.request_id.to_string(),
            s.t_arr.to_string(),
            s.ttft.to_string(),
            (s.tpot.len() + 1).to_string(),
            s.mean_tpot().map_or(String::new(), |m| format!("{m:.1}")),
            s.tpot.iter().max().map_or(String::new(), |m| m.to_string()),
        ])?;
    }
    c.flush().map_err(|e| MetricsError::Csv(e.to_string()))?;
    Ok(())
}

pub fn write_steps_csv<W: Write>(mut w: W, steps: &[StepMetrics]) -> Result<(), MetricsError> {
    schema_row(&mut w, STEPS_SCHEMA).map_err(|e| MetricsError::Csv(e.to_string()))?;
    let mut c = csv::Writer::from_writer(w);
    c.write_record([
        "step",
        "start_us",
        "rollout_us",
        "step_us",
        "tokens_in",
        "tokens_out",
        "throughput_tok_s",
        "launched",
        "done",
        "dropped",
        "reroutes",
        "groups_launched",
        "groups_accepted",
        "borrowed_gpus",
    ])?;
    for s in steps {
        c.write_record([
            s.step.to_string(),
            s.start.to_string(),
            s.rollout_time.to_string(),
            s.step_time.to_string(),
            s.tokens_in.to_string(),
            s.tokens_out.to_string(),
            format!("{:.3}", s.throughput()),
            s.trajectories_launched.to_string(),
            s.trajectories_done.to_string(),
            s.trajectories_dropped.to_string(),
            s.reroutes.to_string(),
            s.groups_launched.to_string(),
            s.groups_accepted.to_string(),
            s.borrowed_gpus.to_string(),
        ])?;
    }
    c.flush().map_err(|e| MetricsError::Csv(e.to_string()))?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(mut w: W, rows: &[RunSummary]) -> Result<(), MetricsError> {
    schema_row(&mut w, SUMMARY_SCHEMA).map_err(|e| MetricsError::Csv(e.to_string()))?;
    let mut c = csv::Writer::from_writer(w);
    for r in rows {
        c.serialize(r)?;
    }
    c.flush().map_err(|e| MetricsError::Csv(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::ms;
    use proptest::prelude::*;

    #[test]
    fn p99_of_one_to_hundred() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 99.0).unwrap(), 99);
        assert_eq!(percentile(&v, 100.0).unwrap(), 100);
        assert_eq!(percentile(&v, 50.0).unwrap(), 50);
    }

    #[test]
    fn single_sample_any_p() {
        for p in [0.1, 50.0, 99.9, 100.0] {
            assert_eq!(percentile(&[7u64], p).unwrap(), 7);
        }
    }

    #[test]
    fn percentile_errors() {
        assert_eq!(percentile::<u64>(&[], 50.0), Err(MetricsError::EmptySamples));
        assert!(matches!(percentile(&[1u64], 0.0), Err(MetricsError::InvalidPercentile(_))));
        assert!(matches!(percentile(&[1u64], 100.5), Err(MetricsError::InvalidPercentile(_))));
    }

    proptest! {
        #[test]
        fn percentile_matches_sort_oracle(v in proptest::collection::vec(0u64..1000, 1..300), p in 1u32..=1000) {
            let p = p as f64 / 10.0;
            let mut s = v.clone();
            s.sort();
            // oracle: smallest value with at least p% of samples at or below it
            let oracle = *s.iter().find(|&&x| {
                let at_or_below = s.iter().filter(|&&y| y <= x).count();
                at_or_below as f64 * 100.0 >= p * s.len() as f64 - 1e-6
            }).unwrap();
            prop_assert_eq!(percentile(&v, p).unwrap(), oracle);
            prop_assert_eq!(percentile_sorted(&s, p).unwrap(), oracle);
        }
    }

    fn sample(ttft: u64, gaps: &[u64]) -> LatencySample {
        LatencySample { request_id: 0, t_arr: 0, ttft, tpot: gaps.to_vec() }
    }

    #[test]
    fn slo_under_budget() {
        let s: Vec<_> = (0..50).map(|_| sample(ms(300), &[ms(100)])).collect();
        let r = slo_report(&s, SloConfig { ttft: ms(500), tpot: ms(150) });
        assert!(!r.violated);
        assert_eq!(r.p99_ttft, ms(300));
    }

    #[test]
    fn slo_strict_comparison() {
        let s = vec![sample(ms(100), &[ms(151)])];
        assert!(slo_report(&s, SloConfig { ttft: ms(500), tpot: ms(150) }).violated);
        let s = vec![sample(ms(100), &[ms(150)])];
        assert!(!slo_report(&s, SloConfig { ttft: ms(500), tpot: ms(150) }).violated);
    }

    #[test]
    fn tpot_is_per_request_mean() {
        // one request stalls once for 2 s; its mean gap crosses the budget,
        // the other 199 requests stay at 20 ms
        let mut s: Vec<_> = (0..199).map(|_| sample(ms(100), &[ms(20); 100])).collect();
        let mut gaps = vec![ms(20); 99];
        gaps.push(ms(2000));
        s.push(sample(ms(100), &gaps));
        let r = slo_report(&s, SloConfig { ttft: ms(500), tpot: ms(150) });
        assert_eq!(r.p99_tpot, ms(20));
        s.push(sample(ms(100), &gaps));
        s.push(sample(ms(100), &gaps));
        let r = slo_report(&s, SloConfig { ttft: ms(500), tpot: ms(150) });
        assert_eq!(r.p99_tpot, (ms(20) * 99 + ms(2000)) / 100);
        assert!(!r.violated);
        assert_eq!(sample(0, &[]).request_tpot(), None);
        assert_eq!(sample(0, &[3, 4]).request_tpot(), Some(3));
    }

    #[test]
    fn throughput_definition() {
        let m = StepMetrics { tokens_in: 3000, tokens_out: 1000, step_time: 2_000_000, ..Default::default() };
        assert_eq!(m.throughput(), 2000.0);
    }

    #[test]
    fn allocation_overhead_ratio() {
        let steps = vec![
            StepMetrics { borrowed_gpus: 2, ..Default::default() },
            StepMetrics { borrowed_gpus: 4, ..Default::default() },
        ];
        let a = AllocationOverhead::from_steps(&steps, 5_000_000, 8, 600_000_000);
        assert_eq!(a.preempted_gpu_time, 30_000_000);
        assert!((a.ratio() - 30.0 / 4800.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_schema_row() {
        let mut buf = Vec::new();
        write_requests_csv(&mut buf, &[sample(5, &[1, 2])]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("#schema=requests-v1"));
        assert_eq!(lines.next(), Some("request_id,t_arr_us,ttft_us,tokens,mean_tpot_us,max_tpot_us"));
        assert_eq!(lines.next(), Some("0,0,5,3,1.5,2"));
    }
}
