use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use coelastic_core::eventlog::{digest_bytes, read_log, EventLog, Replay};
use coelastic_core::metrics::{write_requests_csv, write_steps_csv, write_summary_csv, RunSummary};
use coelastic_core::scenario::{self, parse_override, Scenario};
use coelastic_core::sim::{self, GpuReport, SimOutput};
use coelastic_core::workload::{convert_azure_trace, write_trace};

mod bench;

#[derive(Parser)]
#[command(name = "coelastic", version, about = "Co-serving simulator for RL rollouts on serving GPUs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file or a bundled scenario by name.
    Simulate {
        scenario: String,
        /// Run only these variants (default: all).
        #[arg(long = "variant")]
        variants: Vec<String>,
        /// Override a config key, e.g. `--set sim.steps=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; one subdirectory per variant.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Recompute metrics from an event log and compare with the CSVs next to it.
    Verify { eventlog: PathBuf },
    /// List bundled scenarios and their variants.
    ListScenarios,
    /// Convert an Azure-style LLM inference trace into the simulator's trace format.
    ConvertTrace { input: PathBuf, output: PathBuf },
    /// Weight-transfer benchmark over a throttled loopback link.
    TransferBench(bench::BenchArgs),
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Simulate { scenario, variants, overrides, seed, out } => simulate(&scenario, &variants, &overrides, seed, &out),
        Cmd::Verify { eventlog } => verify(&eventlog),
        Cmd::ListScenarios => {
            for name in scenario::bundled_names() {
                let s = scenario::bundled(name).expect("bundled");
                println!("{name:<20} {}", s.description);
                println!("{:<20} variants: {}", "", s.variant_names().join(", "));
            }
            Ok(())
        }
        Cmd::ConvertTrace { input, output } => {
            let f = File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let recs = convert_azure_trace(BufReader::new(f)).with_context(|| format!("parsing {}", input.display()))?;
            let w = BufWriter::new(File::create(&output).with_context(|| format!("creating {}", output.display()))?);
            write_trace(w, &recs)?;
            println!("{} records -> {}", recs.len(), output.display());
            Ok(())
        }
        Cmd::TransferBench(args) => bench::run(args),
    }
}

fn load_scenario(name: &str) -> Result<Scenario> {
    let path = Path::new(name);
    if path.exists() {
        return Scenario::load(path).with_context(|| format!("loading {name}"));
    }
    scenario::bundled(name).with_context(|| {
        format!("{name}: no such file or bundled scenario (bundled: {})", scenario::bundled_names().join(", "))
    })
}

fn simulate(name: &str, only: &[String], overrides: &[String], seed: Option<u64>, out: &Path) -> Result<()> {
    let mut sc = load_scenario(name)?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        sc.set(&k, v).with_context(|| format!("--set {o}"))?;
    }
    if let Some(s) = seed {
        let (k, v) = parse_override(&format!("sim.seed={s}"))?;
        sc.set(&k, v)?;
    }
    let mut configs = sc.configs()?;
    if !only.is_empty() {
        for v in only {
            if !configs.iter().any(|(n, _)| n == v) {
                bail!("no variant {v} in {} (have: {})", sc.name, sc.variant_names().join(", "));
            }
        }
        configs.retain(|(n, _)| only.contains(n));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    // independent runs; each writes its own directory
    let results: Vec<Result<SimOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|(variant, cfg)| {
                let dir = out.join(sanitize(variant));
                let scenario_name = sc.name.clone();
                s.spawn(move || run_variant(&scenario_name, variant, cfg, &dir))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let mut rows: Vec<RunSummary> = Vec::new();
    for ((variant, _), r) in configs.iter().zip(results) {
        let o = r.with_context(|| format!("variant {variant}"))?;
        if !o.completed {
            eprintln!("warning: variant {variant} hit sim.max_time_s before finishing all steps");
        }
        rows.push(o.summary);
    }
    write_summary_csv(BufWriter::new(File::create(out.join("summary.csv"))?), &rows)?;
    print_table(&rows);
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '+' { c } else { '_' }).collect()
}

fn run_variant(scenario: &str, variant: &str, cfg: &coelastic_core::config::SimConfig, dir: &Path) -> Result<SimOutput> {
    std::fs::create_dir_all(dir)?;
    let log_path = dir.join("eventlog.jsonl");
    let log = EventLog::to_writer(Box::new(BufWriter::new(File::create(&log_path)?)));
    let o = sim::run(cfg, scenario, variant, log)?;
    write_requests_csv(BufWriter::new(File::create(dir.join("requests.csv"))?), &o.samples)?;
    write_steps_csv(BufWriter::new(File::create(dir.join("steps.csv"))?), &o.steps)?;
    write_summary_csv(BufWriter::new(File::create(dir.join("summary.csv"))?), std::slice::from_ref(&o.summary))?;
    write_gpus_csv(BufWriter::new(File::create(dir.join("gpus.csv"))?), &o.gpus)?;
    Ok(o)
}

/// Per-GPU counters; not part of the event log, so `verify` skips it.
fn write_gpus_csv<W: Write>(mut w: W, gpus: &[GpuReport]) -> Result<()> {
    writeln!(
        w,
        "gpu,role,serving_busy_us,rollout_busy_us,admitted,deferred,soundness_violations,stalls,aborted,\
         serving_preemptions,peak_serving_pages,cuts,prefix_hits,prefix_misses,serving_blocked,aborted_by_serving_reclaim"
    )?;
    for g in gpus {
        let (e, m) = (&g.exec, &g.memory);
        writeln!(
            w,
            "{},{:?},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            g.gpu,
            g.role,
            e.serving_busy,
            e.rollout_busy,
            e.admitted,
            e.deferred,
            e.soundness_violations,
            e.stalls,
            e.aborted,
            e.serving_preemptions,
            e.peak_serving_pages,
            m.cuts,
            m.prefix_hits,
            m.prefix_misses,
            m.serving_blocked,
            m.aborted_by_serving_reclaim,
        )?;
    }
    w.flush()?;
    Ok(())
}

fn print_table(rows: &[RunSummary]) {
    println!(
        "{:<22} {:>5} {:>9} {:>9} {:>4} {:>10} {:>10} {:>12} {:>8} {:>6}",
        "variant", "steps", "p99ttft", "p99tpot", "slo", "rollout_s", "step_s", "tok/s", "alloc%", "cuts"
    );
    for r in rows {
        println!(
            "{:<22} {:>5} {:>7.1}ms {:>7.1}ms {:>4} {:>10.2} {:>10.2} {:>12.1} {:>8.3} {:>6}",
            r.variant,
            r.steps,
            r.p99_ttft_us as f64 / 1e3,
            r.p99_tpot_us as f64 / 1e3,
            if r.slo_violated { "FAIL" } else { "ok" },
            r.mean_rollout_s,
            r.mean_step_s,
            r.mean_throughput,
            r.allocation_overhead * 100.0,
            r.emergency_cuts,
        );
    }
}

fn verify(log_path: &Path) -> Result<()> {
    let bytes = std::fs::read(log_path).with_context(|| format!("reading {}", log_path.display()))?;
    let records = read_log(bytes.as_slice())?;
    let replay = Replay::from_records(&records)?;
    let digest = digest_bytes(&bytes);
    let dir = log_path.parent().unwrap_or(Path::new("."));
    let mut checked = 0;
    let mut mismatches = Vec::new();
    let mut expect = |name: &str, rebuilt: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        if p.exists() {
            checked += 1;
            if std::fs::read(&p)? != rebuilt {
                mismatches.push(name.to_string());
            }
        }
        Ok(())
    };
    let mut buf = Vec::new();
    write_requests_csv(&mut buf, &replay.samples)?;
    expect("requests.csv", std::mem::take(&mut buf))?;
    write_steps_csv(&mut buf, &replay.steps)?;
    expect("steps.csv", std::mem::take(&mut buf))?;
    write_summary_csv(&mut buf, &[replay.summary(&digest)])?;
    expect("summary.csv", buf)?;
    println!("events {} records {} digest {digest}", replay.events, records.len());
    if !mismatches.is_empty() {
        bail!("rebuilt metrics differ from {}", mismatches.join(", "));
    }
    println!("verified {checked} file(s) against the log");
    Ok(())
}
