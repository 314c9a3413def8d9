use std::collections::HashMap;

use crate::key::{step_prefix, BucketKey};
use crate::manifest::{infer_shard_rule, Manifest};
use crate::shard::{local_shards, model_shards, ParallelConfig, ShardDescriptor, Slice};
use crate::{Result, TransferError};

/// Shard-to-rank assignment for publishing: shard `i` of the model goes to
/// DP rank `i % dp`, so the sets are disjoint and cover the model.
pub fn plan_pushes(m: &Manifest, train: &ParallelConfig) -> Result<Vec<Vec<ShardDescriptor>>> {
    let mut out = vec![Vec::new(); train.dp as usize];
    for (i, s) in model_shards(m, train)?.into_iter().enumerate() {
        out[i % train.dp as usize].push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ServeRank {
    pub tp_rank: u32,
    pub pp_stage: u32,
}

impl ServeRank {
    pub fn all(cfg: &ParallelConfig) -> Vec<ServeRank> {
        (0..cfg.pp).flat_map(|pp_stage| (0..cfg.tp).map(move |tp_rank| ServeRank { tp_rank, pp_stage })).collect()
    }

    pub fn index(&self, cfg: &ParallelConfig) -> usize {
        (self.pp_stage * cfg.tp + self.tp_rank) as usize
    }
}

/// All buckets of one published shard.
#[derive(Debug, Clone)]
pub struct SourceGroup {
    pub key: BucketKey,
    /// Keys in sequence order.
    pub keys: Vec<String>,
    /// Payload size of each key.
    pub sizes: Vec<u64>,
}

impl SourceGroup {
    pub fn bytes(&self) -> u64 {
        self.sizes.iter().sum()
    }
}

/// A published shard restricted to the part a target needs.
#[derive(Debug, Clone)]
pub struct SourcePull {
    pub group: SourceGroup,
    /// `[start, end)` along the sharded dim in full-tensor coordinates;
    /// `None` for replicated parameters.
    pub overlap: Option<(usize, usize)>,
    /// False when the source shard maps onto the target unchanged.
    pub resliced: bool,
}

#[derive(Debug, Clone)]
pub struct TargetPull {
    pub param: usize,
    pub target: ShardDescriptor,
    pub sources: Vec<SourcePull>,
}

#[derive(Debug, Clone)]
pub struct PullPlan {
    /// Indexed by [`ServeRank::index`].
    pub ranks: Vec<(ServeRank, Vec<TargetPull>)>,
}

impl PullPlan {
    pub fn keys(&self, rank: usize) -> Vec<(String, u64)> {
        let mut out = Vec::new();
        for t in &self.ranks[rank].1 {
            for s in &t.sources {
                out.extend(s.group.keys.iter().cloned().zip(s.group.sizes.iter().copied()));
            }
        }
        out
    }
}

/// Complete source shards available for one step, grouped by parameter.
#[derive(Debug, Default)]
pub struct KeyIndex {
    by_param: HashMap<String, Vec<SourceGroup>>,
}

impl KeyIndex {
    /// Builds from a relay listing. Shards missing any sequence number are
    /// left out.
    pub fn new(step: u64, listing: &[(String, u64)]) -> Result<Self> {
        let prefix = step_prefix(step);
        let mut partial: HashMap<String, (BucketKey, Vec<Option<(String, u64)>>)> = HashMap::new();
        for (k, size) in listing.iter().filter(|(k, _)| k.starts_with(&prefix)) {
            let key: BucketKey = k.parse()?;
            if key.total == 0 || key.seq >= key.total {
                return Err(TransferError::BadKey { key: k.clone(), reason: "sequence out of range".into() });
            }
            let e = partial
                .entry(key.shard_prefix())
                .or_insert_with(|| (key.with_seq(0), vec![None; key.total as usize]));
            if e.1.len() != key.total as usize {
                return Err(TransferError::BadKey { key: k.clone(), reason: "inconsistent bucket count".into() });
            }
            e.1[key.seq as usize] = Some((k.clone(), *size));
        }
        let mut by_param: HashMap<String, Vec<SourceGroup>> = HashMap::new();
        for (key, slots) in partial.into_values() {
            if let Some(entries) = slots.into_iter().collect::<Option<Vec<_>>>() {
                let (keys, sizes) = entries.into_iter().unzip();
                by_param.entry(key.shard.param.clone()).or_default().push(SourceGroup { key, keys, sizes });
            }
        }
        for v in by_param.values_mut() {
            v.sort_by(|a, b| a.keys[0].cmp(&b.keys[0]));
        }
        Ok(KeyIndex { by_param })
    }

    pub fn groups(&self) -> impl Iterator<Item = &SourceGroup> {
        self.by_param.values().flatten()
    }

    /// Sources covering `target` exactly once, or the first uncovered gap.
    pub fn plan_target(&self, m: &Manifest, param: usize, target: &ShardDescriptor, rank: usize) -> Result<TargetPull> {
        let meta = &m.params[param];
        let cands = self.by_param.get(&meta.name).map(Vec::as_slice).unwrap_or(&[]);
        let Some(dim) = infer_shard_rule(meta)? else {
            let g = cands.iter().find(|g| g.key.shard.slice == Slice::Full).ok_or_else(|| {
                TransferError::IncompleteCoverage { param: meta.name.clone(), rank, dim: 0, start: 0, end: meta.shape[0] }
            })?;
            let sources = vec![SourcePull { group: g.clone(), overlap: None, resliced: false }];
            return Ok(TargetPull { param, target: target.clone(), sources });
        };
        let (t0, t1) = target.slice.bounds(dim, &meta.shape);
        let mut spans: Vec<(usize, usize, &SourceGroup)> = cands
            .iter()
            .filter(|g| match g.key.shard.slice {
                Slice::Full => true,
                Slice::Range { dim: d, .. } => d == dim,
            })
            .map(|g| {
                let (s0, s1) = g.key.shard.slice.bounds(dim, &meta.shape);
                (s0, s1, g)
            })
            .filter(|&(s0, s1, _)| s0 < t1 && s1 > t0)
            .collect();
        spans.sort_by_key(|&(s0, s1, _)| (s0, std::cmp::Reverse(s1)));
        let mut sources = Vec::new();
        let mut cur = t0;
        while cur < t1 {
            let best = spans.iter().filter(|&&(s0, s1, _)| s0 <= cur && s1 > cur).max_by_key(|&&(_, s1, _)| s1);
            let Some(&(s0, s1, g)) = best else {
                let end = spans.iter().map(|&(s0, _, _)| s0).filter(|&s0| s0 > cur).min().unwrap_or(t1).min(t1);
                return Err(TransferError::IncompleteCoverage { param: meta.name.clone(), rank, dim, start: cur, end });
            };
            let end = s1.min(t1);
            sources.push(SourcePull { group: g.clone(), overlap: Some((cur, end)), resliced: (s0, s1) != (cur, end) || (t0, t1) != (s0, s1) });
            cur = end;
        }
        Ok(TargetPull { param, target: target.clone(), sources })
    }
}

/// Targets every serving rank must fill: its local shards under `serve`.
pub fn serving_targets(m: &Manifest, serve: &ParallelConfig) -> Result<Vec<(ServeRank, Vec<(usize, ShardDescriptor)>)>> {
    ServeRank::all(serve)
        .into_iter()
        .map(|r| Ok((r, local_shards(m, serve, r.tp_rank, r.pp_stage)?)))
        .collect()
}

/// Per-serving-rank source buckets for `step`, given the relay listing.
pub fn plan_pulls(m: &Manifest, serve: &ParallelConfig, step: u64, listing: &[(String, u64)]) -> Result<PullPlan> {
    let index = KeyIndex::new(step, listing)?;
    let mut ranks = Vec::new();
    for (rank, targets) in serving_targets(m, serve)? {
        let ri = rank.index(serve);
        let pulls = targets.iter().map(|(p, t)| index.plan_target(m, *p, t, ri)).collect::<Result<Vec<_>>>()?;
        ranks.push((rank, pulls));
    }
    Ok(PullPlan { ranks })
}

/// Groups keys into consecutive batches of at most `batch_bytes`; a key
/// larger than that travels alone.
pub fn pull_batches(keys: &[(String, u64)], batch_bytes: u64) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    let mut size = 0;
    for (k, s) in keys {
        if out.is_empty() || size + s > batch_bytes {
            out.push(Vec::new());
            size = 0;
        }
        out.last_mut().expect("pushed").push(k.clone());
        size += s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elem::DType;
    use crate::key::Codec;

    fn listing(m: &Manifest, train: &ParallelConfig, step: u64) -> Vec<(String, u64)> {
        model_shards(m, train)
            .unwrap()
            .into_iter()
            .map(|shard| {
                let k = BucketKey { step, shard, codec: Codec::Dense { dtype: DType::F32 }, seq: 0, total: 1 };
                (k.to_string(), 4)
            })
            .collect()
    }

    #[test]
    fn push_sets_partition_the_model() {
        let m = Manifest::toy_transformer(2, 64, 128, DType::F32).unwrap();
        let train = ParallelConfig::new(2, 1, 2).unwrap();
        let sets = plan_pushes(&m, &train).unwrap();
        let all = model_shards(&m, &train).unwrap();
        assert_eq!(sets[0].len() + sets[1].len(), all.len());
        assert!(sets[0].len().abs_diff(sets[1].len()) <= 1);
        let one = plan_pushes(&m, &ParallelConfig::new(2, 1, 1).unwrap()).unwrap();
        assert_eq!(one, vec![all]);
    }

    #[test]
    fn tp8_pp2_to_tp4_pulls_rank_pairs() {
        let m = Manifest::toy_transformer(4, 64, 128, DType::F32).unwrap();
        let train = ParallelConfig::new(8, 2, 1).unwrap();
        let serve = ParallelConfig::new(4, 1, 1).unwrap();
        let plan = plan_pulls(&m, &serve, 3, &listing(&m, &train, 3)).unwrap();
        let (rank, targets) = &plan.ranks[0];
        assert_eq!(rank.tp_rank, 0);
        assert_eq!(targets.len(), m.params.len());
        for t in targets {
            let srcs: Vec<u32> = t.sources.iter().map(|s| s.group.key.shard.tp_rank).collect();
            if infer_shard_rule(&m.params[t.param]).unwrap().is_some() {
                assert_eq!(srcs, vec![0, 1], "{}", t.target.param);
            } else {
                assert_eq!(srcs, vec![0]);
            }
        }
    }

    #[test]
    fn identical_configs_map_identically() {
        let m = Manifest::toy_transformer(2, 64, 128, DType::F32).unwrap();
        let cfg = ParallelConfig::new(2, 2, 1).unwrap();
        let plan = plan_pulls(&m, &cfg, 0, &listing(&m, &cfg, 0)).unwrap();
        for (rank, targets) in &plan.ranks {
            for t in targets {
                assert_eq!(t.sources.len(), 1);
                let s = &t.sources[0];
                assert!(!s.resliced);
                assert_eq!(s.group.key.shard.pp_stage, rank.pp_stage);
            }
        }
    }

    #[test]
    fn missing_bucket_names_the_gap() {
        let m = Manifest::toy_transformer(2, 64, 128, DType::F32).unwrap();
        let train = ParallelConfig::new(4, 1, 1).unwrap();
        let mut keys = listing(&m, &train, 1);
        let victim = keys.iter().position(|(k, _)| k.contains("layers.1.mlp.up_proj/tp2of4")).unwrap();
        keys.remove(victim);
        let err = plan_pulls(&m, &ParallelConfig::new(1, 1, 1).unwrap(), 1, &keys).unwrap_err();
        match err {
            TransferError::IncompleteCoverage { param, dim, start, end, .. } => {
                assert_eq!(param, "layers.1.mlp.up_proj");
                assert_eq!((dim, start, end), (0, 128, 192));
            }
            e => panic!("{e}"),
        }
        // other steps are ignored
        assert!(plan_pulls(&m, &ParallelConfig::new(1, 1, 1).unwrap(), 2, &listing(&m, &train, 1)).is_err());
    }

    #[test]
    fn batches_cap_bytes() {
        let keys: Vec<(String, u64)> = [5u64, 5, 3, 12, 1].iter().enumerate().map(|(i, &s)| (i.to_string(), s)).collect();
        let b = pull_batches(&keys, 10);
        assert_eq!(b, vec![vec!["0", "1"], vec!["2"], vec!["3"], vec!["4"]]);
        assert!(pull_batches(&[], 10).is_empty());
    }
}
