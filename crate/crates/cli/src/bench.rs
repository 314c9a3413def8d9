use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coelastic_transfer::{
    synth, sync_step, DType, Manifest, MemoryRelay, ParallelConfig, RelayServer, ServingState, SyncOptions,
    TcpRelay, TrainingState, TransferReport, Weight,
};

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Tcp,
    Memory,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 4)]
    layers: u32,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 4096)]
    vocab: usize,
    #[arg(long, default_value_t = 2)]
    train_tp: u32,
    #[arg(long, default_value_t = 2)]
    train_pp: u32,
    #[arg(long, default_value_t = 2)]
    train_dp: u32,
    #[arg(long, default_value_t = 4)]
    serve_tp: u32,
    #[arg(long, default_value_t = 1)]
    serve_pp: u32,
    /// Nominal link speeds, each divided by `--divisor` before throttling.
    #[arg(long, value_delimiter = ',', default_value = "1,5,20,200")]
    bandwidth_gbps: Vec<f64>,
    #[arg(long, default_value_t = 16.0)]
    divisor: f64,
    /// Any of batch, async, shard-aware, sparse.
    #[arg(long, value_delimiter = ',', default_value = "batch,async,shard-aware,sparse")]
    modes: Vec<String>,
    /// Fraction of elements left unchanged by the synthetic update.
    #[arg(long, default_value_t = 0.95)]
    sparsity: f64,
    #[arg(long, value_enum, default_value = "tcp")]
    transport: Transport,
    #[arg(long, default_value_t = 64)]
    bucket_mib: usize,
    #[arg(long, default_value_t = 1)]
    repeats: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: BenchArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.sparsity) {
        bail!("--sparsity must be in [0, 1]");
    }
    if a.divisor <= 0.0 || a.bandwidth_gbps.iter().any(|&g| g <= 0.0) {
        bail!("bandwidths and --divisor must be positive");
    }
    let manifest = Manifest::toy_transformer(a.layers, a.hidden, a.vocab, DType::F32)?;
    let train_cfg = ParallelConfig::new(a.train_tp, a.train_pp, a.train_dp)?;
    let serve_cfg = ParallelConfig::new(a.serve_tp, a.serve_pp, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let prev = synth::model(&manifest, &mut rng, synth::weight_f32);
    let cur = synth::perturb(&prev, 1.0 - a.sparsity, &mut rng, synth::nudge_f32);
    let serve0 = ServingState::from_full(manifest.clone(), serve_cfg, &prev)?;
    let train = TrainingState::new(manifest, train_cfg, prev, cur)?;
    let mut modes = Vec::new();
    for m in &a.modes {
        let opts = SyncOptions::mode(m).with_context(|| format!("unknown mode {m}"))?;
        modes.push((m.clone(), opts));
    }
    let server = match a.transport {
        Transport::Tcp => Some(RelayServer::bind("127.0.0.1:0")?),
        Transport::Memory => None,
    };
    let mut w: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(
        w,
        "mode,gbps,link_bytes_per_s,step,wall_s,push_s,pull_s,d2s_s,s2d_s,pushed_bytes,pulled_bytes,\
         max_rank_pulled_bytes,buckets,sparse_shards,dense_fallbacks,exact"
    )?;
    let mut step = 0;
    for &gbps in &a.bandwidth_gbps {
        for (name, base) in &modes {
            for _ in 0..a.repeats {
                step += 1;
                let opts = SyncOptions {
                    link_bytes_per_sec: Some(gbps * 1e9 / 8.0 / a.divisor),
                    bucket_bytes: a.bucket_mib << 20,
                    ..base.clone()
                };
                let mut serve = serve0.clone();
                let rep = match &server {
                    Some(s) => sync_step(step, &train, &mut serve, &TcpRelay::new(s.addr()), &opts)?,
                    None => sync_step(step, &train, &mut serve, &MemoryRelay::new(), &opts)?,
                };
                let exact = exact(&serve, &train)?;
                write_row(&mut w, name, gbps, &opts, &rep, exact)?;
                if !exact {
                    bail!("{name} at {gbps} Gbps: serving weights differ from W_t");
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn exact(serve: &ServingState<Weight>, train: &TrainingState<Weight>) -> Result<bool> {
    Ok(serve.assemble()?.iter().zip(&train.cur).all(|(a, b)| a.bit_eq(b)))
}

fn write_row(w: &mut dyn Write, name: &str, gbps: f64, o: &SyncOptions, r: &TransferReport, exact: bool) -> Result<()> {
    writeln!(
        w,
        "{name},{gbps},{:.0},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{},{exact}",
        o.link_bytes_per_sec.unwrap_or(0.0),
        r.step,
        r.wall_s,
        r.push_s,
        r.pull_s,
        r.d2s_s,
        r.s2d_s,
        r.pushed_bytes,
        r.pulled_bytes,
        r.max_rank_pulled_bytes,
        r.buckets,
        r.sparse_shards,
        r.dense_fallbacks,
    )?;
    Ok(())
}
