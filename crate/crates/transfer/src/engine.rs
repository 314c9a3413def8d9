//! One weight-sync step: training ranks publish, serving ranks pull and
//! apply. Every push worker and every serving rank gets its own relay
//! session, i.e. its own link and throttle.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crate::coo::{apply_delta, sparsify, Encoded, SparseDelta};
use crate::elem::WeightElem;
use crate::key::{step_prefix, BucketKey, Codec};
use crate::manifest::{infer_shard_rule, Manifest};
use crate::plan::{plan_pushes, pull_batches, serving_targets, KeyIndex, ServeRank, TargetPull};
use crate::relay::{Relay, RelaySession};
use crate::shard::{local_shards, model_shards, ParallelConfig, ShardDescriptor, Slice};
use crate::tensor::Tensor;
use crate::throttle::TokenBucket;
use crate::wire::bucket_ranges;
use crate::{Result, TransferError, DEFAULT_BUCKET_BYTES, DEFAULT_DENSITY_THRESHOLD, DEFAULT_PULL_BATCH_BYTES};

#[derive(Debug, Clone)]
pub struct SyncOptions {
    /// Pull buckets as they land instead of after every push finished.
    pub overlap: bool,
    /// Push from every DP rank and pull only needed shards. Otherwise one
    /// rank pushes the whole model and every serving rank pulls a full
    /// replica.
    pub shard_aware: bool,
    /// Publish COO deltas where the density threshold allows.
    pub sparse: bool,
    pub density_threshold: f64,
    pub bucket_bytes: usize,
    pub pull_batch_bytes: usize,
    /// Per-link payload bandwidth; `None` is unthrottled.
    pub link_bytes_per_sec: Option<f64>,
    pub timeout: Duration,
    /// Relay listing interval while waiting for buckets.
    pub poll: Duration,
}

impl Default for SyncOptions {
    fn default() -> Self {
        SyncOptions {
            overlap: true,
            shard_aware: true,
            sparse: true,
            density_threshold: DEFAULT_DENSITY_THRESHOLD,
            bucket_bytes: DEFAULT_BUCKET_BYTES,
            pull_batch_bytes: DEFAULT_PULL_BATCH_BYTES,
            link_bytes_per_sec: None,
            timeout: Duration::from_secs(60),
            poll: Duration::from_millis(1),
        }
    }
}

impl SyncOptions {
    /// The ladder of modes, each adding one optimization.
    pub fn mode(name: &str) -> Option<SyncOptions> {
        let d = SyncOptions::default();
        Some(match name {
            "batch" => SyncOptions { overlap: false, shard_aware: false, sparse: false, ..d },
            "async" => SyncOptions { overlap: true, shard_aware: false, sparse: false, ..d },
            "shard-aware" => SyncOptions { overlap: true, shard_aware: true, sparse: false, ..d },
            "sparse" => d,
            _ => return None,
        })
    }

    pub fn mode_name(&self) -> String {
        let base = if self.overlap { "async" } else { "batch" };
        let mut s = base.to_string();
        if self.shard_aware {
            s.push_str("+shard");
        }
        if self.sparse {
            s.push_str("+sparse");
        }
        s
    }

    fn throttle(&self) -> Option<TokenBucket> {
        self.link_bytes_per_sec.map(TokenBucket::new)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferReport {
    pub mode: String,
    pub step: u64,
    pub push_s: f64,
    pub pull_s: f64,
    /// Dense-to-sparse conversion on the training side, slowest rank.
    pub d2s_s: f64,
    /// Decode and apply on the serving side, slowest rank.
    pub s2d_s: f64,
    pub wall_s: f64,
    pub pushed_bytes: u64,
    pub pulled_bytes: u64,
    pub max_rank_pulled_bytes: u64,
    pub buckets: u64,
    pub sparse_shards: u64,
    pub dense_fallbacks: u64,
}

fn check_tensors<E: WeightElem>(m: &Manifest, ts: &[Tensor<E>]) -> Result<()> {
    if ts.len() != m.params.len() {
        return Err(TransferError::InvalidConfig(format!("{} tensors for {} parameters", ts.len(), m.params.len())));
    }
    for (p, t) in m.params.iter().zip(ts) {
        if p.dtype != E::DTYPE {
            return Err(TransferError::InvalidConfig(format!("{} is {:?}, element type is {:?}", p.name, p.dtype, E::DTYPE)));
        }
        if t.shape() != p.shape.as_slice() {
            return Err(TransferError::ShapeMismatch { expected: p.shape.clone(), got: t.shape().to_vec() });
        }
    }
    Ok(())
}

fn extract<E: WeightElem>(t: &Tensor<E>, slice: Slice) -> Tensor<E> {
    match slice {
        Slice::Full => t.clone(),
        Slice::Range { dim, start, end } => t.slice(dim, start, end),
    }
}

/// `W_{t-1}` and `W_t` of the whole model, indexed like the manifest.
#[derive(Debug, Clone)]
pub struct TrainingState<E> {
    pub manifest: Manifest,
    pub config: ParallelConfig,
    pub prev: Vec<Tensor<E>>,
    pub cur: Vec<Tensor<E>>,
}

impl<E: WeightElem> TrainingState<E> {
    pub fn new(manifest: Manifest, config: ParallelConfig, prev: Vec<Tensor<E>>, cur: Vec<Tensor<E>>) -> Result<Self> {
        config.validate()?;
        check_tensors(&manifest, &prev)?;
        check_tensors(&manifest, &cur)?;
        // every shard must be representable under this layout
        model_shards(&manifest, &config)?;
        Ok(TrainingState { manifest, config, prev, cur })
    }
}

#[derive(Debug, Clone)]
pub struct ServingShard<E> {
    pub param: usize,
    pub desc: ShardDescriptor,
    pub tensor: Tensor<E>,
}

/// Resident serving weights, one shard list per serving rank in
/// [`ServeRank::index`] order.
#[derive(Debug, Clone)]
pub struct ServingState<E> {
    pub manifest: Manifest,
    pub config: ParallelConfig,
    pub ranks: Vec<Vec<ServingShard<E>>>,
}

impl<E: WeightElem> ServingState<E> {
    pub fn from_full(manifest: Manifest, config: ParallelConfig, full: &[Tensor<E>]) -> Result<Self> {
        check_tensors(&manifest, full)?;
        let mut ranks = Vec::new();
        for r in ServeRank::all(&config) {
            let shards = local_shards(&manifest, &config, r.tp_rank, r.pp_stage)?
                .into_iter()
                .map(|(param, desc)| ServingShard { param, tensor: extract(&full[param], desc.slice), desc })
                .collect();
            ranks.push(shards);
        }
        Ok(ServingState { manifest, config, ranks })
    }

    /// Full tensors rebuilt from the shards. Replicated copies must agree
    /// bitwise.
    pub fn assemble(&self) -> Result<Vec<Tensor<E>>> {
        let m = &self.manifest;
        let mut out: Vec<Option<Tensor<E>>> = m.params.iter().map(|_| None).collect();
        for s in self.ranks.iter().flatten() {
            let meta = &m.params[s.param];
            match s.desc.slice {
                Slice::Full => match &out[s.param] {
                    Some(t) if !t.bit_eq(&s.tensor) => {
                        return Err(TransferError::InvalidConfig(format!("replicas of {} disagree", meta.name)));
                    }
                    Some(_) => {}
                    None => out[s.param] = Some(s.tensor.clone()),
                },
                Slice::Range { dim, start, .. } => {
                    let full = out[s.param].get_or_insert_with(|| Tensor::filled(meta.shape.clone(), s.tensor.data()[0]));
                    full.write_slice(dim, start, &s.tensor)?;
                }
            }
        }
        out.into_iter()
            .zip(&m.params)
            .map(|(t, p)| t.ok_or_else(|| TransferError::InvalidConfig(format!("no serving shard holds {}", p.name))))
            .collect()
    }
}

#[derive(Default)]
struct PushStats {
    elapsed: f64,
    d2s: f64,
    bytes: u64,
    moved: u64,
    buckets: u64,
    sparse: u64,
    dense: u64,
}

#[derive(Default)]
struct PullStats {
    elapsed: f64,
    s2d: f64,
    moved: u64,
}

fn push_worker<E: WeightElem, R: Relay>(
    step: u64,
    train: &TrainingState<E>,
    index: &HashMap<&str, usize>,
    shards: &[ShardDescriptor],
    relay: &R,
    opts: &SyncOptions,
    t0: Instant,
) -> Result<PushStats> {
    let mut sess = relay.session(opts.throttle())?;
    let mut st = PushStats::default();
    for shard in shards {
        let p = index[shard.param.as_str()];
        let dense = |st: &mut PushStats| {
            st.dense += 1;
            let t = &train.cur[p];
            let bytes = match shard.slice {
                Slice::Full => t.to_le_bytes(),
                Slice::Range { dim, start, end } => t.slice_le_bytes(dim, start, end),
            };
            (bytes, Codec::Dense { dtype: E::DTYPE }, E::WIDTH)
        };
        let (payload, codec, entry) = if opts.sparse {
            let t = Instant::now();
            let cur = extract(&train.cur[p], shard.slice);
            let prev = extract(&train.prev[p], shard.slice);
            let out = match sparsify(&cur, &prev, opts.density_threshold)? {
                Encoded::SparseCoo(d) => {
                    st.sparse += 1;
                    let codec = Codec::Coo { dtype: E::DTYPE, index_width: d.index_width(), nnz: d.nnz() as u64 };
                    (d.encode(), codec, d.entry_bytes())
                }
                Encoded::DenseFallback(_) => dense(&mut st),
            };
            st.d2s += t.elapsed().as_secs_f64();
            out
        } else {
            dense(&mut st)
        };
        let ranges = bucket_ranges(payload.len(), opts.bucket_bytes, entry);
        let total = ranges.len() as u32;
        for (seq, (a, b)) in ranges.into_iter().enumerate() {
            let key = BucketKey { step, shard: shard.clone(), codec, seq: seq as u32, total };
            sess.push(&key.to_string(), &payload[a..b])?;
            st.bytes += (b - a) as u64;
            st.buckets += 1;
        }
    }
    st.moved = sess.bytes_moved();
    st.elapsed = t0.elapsed().as_secs_f64();
    Ok(st)
}

fn apply_target<E: WeightElem>(
    m: &Manifest,
    t: &TargetPull,
    shard: &mut ServingShard<E>,
    cache: &HashMap<String, Vec<u8>>,
) -> Result<()> {
    let meta = &m.params[t.param];
    let dim = infer_shard_rule(meta)?;
    for src in &t.sources {
        let key = &src.group.key;
        let src_shape = key.shard.slice.shape(&meta.shape);
        let mut payload = Vec::with_capacity(src.group.bytes() as usize);
        for k in &src.group.keys {
            payload.extend_from_slice(&cache[k]);
        }
        let (s0, _) = dim.map_or((0, 0), |d| key.shard.slice.bounds(d, &meta.shape));
        match key.codec {
            Codec::Dense { dtype } if dtype == E::DTYPE => match (dim, src.overlap) {
                (Some(d), Some((a, b))) => {
                    let (t0, _) = shard.desc.slice.bounds(d, &meta.shape);
                    shard.tensor.write_le_rows(d, a - t0, &src_shape, a - s0, b - s0, &payload)?;
                }
                _ => {
                    let full = Tensor::<E>::from_le_bytes(src_shape, &payload)?;
                    if full.shape() != shard.tensor.shape() {
                        return Err(TransferError::ShapeMismatch { expected: shard.tensor.shape().to_vec(), got: full.shape().to_vec() });
                    }
                    shard.tensor = full;
                }
            },
            Codec::Coo { dtype, nnz, .. } if dtype == E::DTYPE => {
                let delta = SparseDelta::<E>::decode(src_shape, &payload)?;
                if delta.nnz() as u64 != nnz {
                    return Err(TransferError::InvalidDelta(format!("{}: {} entries, key says {nnz}", key.shard.param, delta.nnz())));
                }
                match (dim, src.overlap) {
                    (Some(d), Some((a, b))) => {
                        let sub = delta.sub_slice(d, a - s0, b - s0);
                        apply_delta(&mut shard.tensor, shard.desc.slice, &sub, Slice::Range { dim: d, start: a, end: b })?;
                    }
                    _ => apply_delta(&mut shard.tensor, Slice::Full, &delta, Slice::Full)?,
                }
            }
            c => {
                return Err(TransferError::InvalidConfig(format!("{}: codec {c:?} does not match {:?}", key.shard.param, E::DTYPE)));
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn pull_worker<E: WeightElem, R: Relay>(
    step: u64,
    m: &Manifest,
    rank: usize,
    shards: &mut [ServingShard<E>],
    full_model: &[(usize, ShardDescriptor)],
    relay: &R,
    opts: &SyncOptions,
    abort: &AtomicBool,
) -> Result<PullStats> {
    let start = Instant::now();
    let deadline = start + opts.timeout;
    let mut sess = relay.session(opts.throttle())?;
    let mut st = PullStats::default();
    let prefix = step_prefix(step);
    // local targets apply; full-replica targets are fetched and discarded
    let mut local: Vec<usize> = (0..shards.len()).collect();
    let mut replica: Vec<usize> = if opts.shard_aware { Vec::new() } else { (0..full_model.len()).collect() };
    let mut fetched: HashSet<String> = HashSet::new();
    let mut cache: HashMap<String, Vec<u8>> = HashMap::new();
    while !local.is_empty() || !replica.is_empty() {
        if abort.load(Ordering::SeqCst) {
            return Err(TransferError::Wire("publisher failed".into()));
        }
        let index = KeyIndex::new(step, &sess.list(&prefix)?)?;
        let mut gap = None;
        let mut ready_local = Vec::new();
        local.retain(|&i| match index.plan_target(m, shards[i].param, &shards[i].desc, rank) {
            Ok(t) => {
                ready_local.push((i, t));
                false
            }
            Err(e) => {
                gap.get_or_insert(e);
                true
            }
        });
        let mut want: Vec<(String, u64)> = Vec::new();
        let mut needed = HashSet::new();
        for (_, t) in &ready_local {
            for s in &t.sources {
                needed.extend(s.group.keys.iter().cloned());
                want.extend(s.group.keys.iter().cloned().zip(s.group.sizes.iter().copied()));
            }
        }
        replica.retain(|&i| {
            let (p, d) = &full_model[i];
            match index.plan_target(m, *p, d, rank) {
                Ok(t) => {
                    for s in &t.sources {
                        want.extend(s.group.keys.iter().cloned().zip(s.group.sizes.iter().copied()));
                    }
                    false
                }
                Err(e) => {
                    gap.get_or_insert(e);
                    true
                }
            }
        });
        want.retain(|(k, _)| fetched.insert(k.clone()));
        for batch in pull_batches(&want, opts.pull_batch_bytes as u64) {
            let payloads = sess.pull(&batch, opts.timeout)?;
            for (k, p) in batch.into_iter().zip(payloads) {
                if needed.contains(&k) {
                    cache.insert(k, p);
                }
            }
        }
        let t = Instant::now();
        for (i, target) in &ready_local {
            apply_target(m, target, &mut shards[*i], &cache)?;
            for s in &target.sources {
                for k in &s.group.keys {
                    cache.remove(k);
                }
            }
        }
        st.s2d += t.elapsed().as_secs_f64();
        if let Some(e) = gap {
            if !opts.overlap || Instant::now() >= deadline {
                return Err(e);
            }
            if ready_local.is_empty() {
                std::thread::sleep(opts.poll);
            }
        }
    }
    st.moved = sess.bytes_moved();
    st.elapsed = start.elapsed().as_secs_f64();
    Ok(st)
}

/// Publishes `train.cur` for `step` and brings every serving shard from
/// `W_{t-1}` to `W_t`.
pub fn sync_step<E: WeightElem, R: Relay>(
    step: u64,
    train: &TrainingState<E>,
    serve: &mut ServingState<E>,
    relay: &R,
    opts: &SyncOptions,
) -> Result<TransferReport> {
    let m = &train.manifest;
    if m.params != serve.manifest.params || m.layers != serve.manifest.layers {
        return Err(TransferError::InvalidConfig("training and serving manifests differ".into()));
    }
    let push_sets = if opts.shard_aware { plan_pushes(m, &train.config)? } else { vec![model_shards(m, &train.config)?] };
    let full_model: Vec<(usize, ShardDescriptor)> = if opts.shard_aware {
        Vec::new()
    } else {
        let whole = ParallelConfig::new(1, 1, 1)?;
        serving_targets(m, &whole)?.swap_remove(0).1
    };
    let index: HashMap<&str, usize> = m.params.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();
    let abort = AtomicBool::new(false);
    let t0 = Instant::now();
    let (pushes, pulls) = std::thread::scope(|s| {
        let push_handles: Vec<_> = push_sets
            .iter()
            .map(|set| {
                let (index, abort) = (&index, &abort);
                s.spawn(move || {
                    let r = push_worker(step, train, index, set, relay, opts, t0);
                    if r.is_err() {
                        abort.store(true, Ordering::SeqCst);
                    }
                    r
                })
            })
            .collect();
        let join_pushes = |hs: Vec<std::thread::ScopedJoinHandle<'_, Result<PushStats>>>| -> Vec<Result<PushStats>> {
            hs.into_iter().map(|h| h.join().expect("push worker panicked")).collect()
        };
        let mut pushes = None;
        let mut push_handles = Some(push_handles);
        if !opts.overlap {
            pushes = Some(join_pushes(push_handles.take().expect("once")));
        }
        let pull_handles: Vec<_> = serve
            .ranks
            .iter_mut()
            .enumerate()
            .map(|(rank, shards)| {
                let (abort, full_model) = (&abort, &full_model);
                s.spawn(move || pull_worker(step, m, rank, shards, full_model, relay, opts, abort))
            })
            .collect();
        let pulls: Vec<_> = pull_handles.into_iter().map(|h| h.join().expect("pull worker panicked")).collect();
        let pushes = pushes.unwrap_or_else(|| join_pushes(push_handles.take().expect("once")));
        (pushes, pulls)
    });
    let wall_s = t0.elapsed().as_secs_f64();
    let pushes = pushes.into_iter().collect::<Result<Vec<_>>>()?;
    let pulls = pulls.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rep = TransferReport { mode: opts.mode_name(), step, wall_s, ..Default::default() };
    for p in &pushes {
        debug_assert_eq!(p.bytes, p.moved);
        rep.push_s = rep.push_s.max(p.elapsed);
        rep.d2s_s = rep.d2s_s.max(p.d2s);
        rep.pushed_bytes += p.moved;
        rep.buckets += p.buckets;
        rep.sparse_shards += p.sparse;
        rep.dense_fallbacks += if opts.sparse { p.dense } else { 0 };
    }
    for p in &pulls {
        rep.pull_s = rep.pull_s.max(p.elapsed);
        rep.s2d_s = rep.s2d_s.max(p.s2d);
        rep.pulled_bytes += p.moved;
        rep.max_rank_pulled_bytes = rep.max_rank_pulled_bytes.max(p.moved);
    }
    Ok(rep)
}
