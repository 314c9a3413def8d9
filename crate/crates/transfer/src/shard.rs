use crate::manifest::{infer_shard_rule, Manifest, ParamMeta};
use crate::{Result, TransferError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slice {
    Full,
    Range { dim: usize, start: usize, end: usize },
}

impl Slice {
    /// Shape of the slice of a tensor with `full` shape.
    pub fn shape(&self, full: &[usize]) -> Vec<usize> {
        let mut s = full.to_vec();
        if let Slice::Range { dim, start, end } = *self {
            s[dim] = end - start;
        }
        s
    }

    /// `[start, end)` along `dim`; `Full` covers the whole extent.
    pub fn bounds(&self, dim: usize, full: &[usize]) -> (usize, usize) {
        match *self {
            Slice::Full => (0, full[dim]),
            Slice::Range { start, end, .. } => (start, end),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ShardDescriptor {
    pub param: String,
    pub tp_rank: u32,
    pub tp_size: u32,
    pub pp_stage: u32,
    pub slice: Slice,
}

/// Tensor and pipeline parallel degrees, plus data parallel for push fan-out.
/// Expert and sequence parallelism are not supported and must stay at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParallelConfig {
    pub tp: u32,
    pub pp: u32,
    pub dp: u32,
    pub ep: u32,
    pub sp: u32,
}

impl ParallelConfig {
    pub fn new(tp: u32, pp: u32, dp: u32) -> Result<Self> {
        let c = ParallelConfig { tp, pp, dp, ep: 1, sp: 1 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ep != 1 {
            return Err(TransferError::UnsupportedParallelism(format!("expert parallelism ep={}", self.ep)));
        }
        if self.sp != 1 {
            return Err(TransferError::UnsupportedParallelism(format!("sequence parallelism sp={}", self.sp)));
        }
        if self.tp == 0 || self.pp == 0 || self.dp == 0 {
            return Err(TransferError::InvalidConfig(format!("zero degree in {self:?}")));
        }
        Ok(())
    }

    pub fn ranks_per_replica(&self) -> usize {
        (self.tp * self.pp) as usize
    }
}

/// `[start, end)` of `tp_rank` when `shape[dim]` is split evenly `tp_size` ways.
pub fn slice_range(shape: &[usize], dim: usize, tp_rank: u32, tp_size: u32) -> Result<(usize, usize)> {
    slice_range_of("", shape, dim, tp_rank, tp_size)
}

fn slice_range_of(param: &str, shape: &[usize], dim: usize, tp_rank: u32, tp_size: u32) -> Result<(usize, usize)> {
    let len = shape[dim];
    if tp_size == 0 || len % tp_size as usize != 0 {
        return Err(TransferError::IndivisibleShape { param: param.to_string(), dim, len, tp: tp_size });
    }
    assert!(tp_rank < tp_size);
    let w = len / tp_size as usize;
    let start = tp_rank as usize * w;
    Ok((start, start + w))
}

/// Shard of `meta` held by `tp_rank` under `cfg`. Replicated parameters
/// come back `Full`.
pub fn shard_of(meta: &ParamMeta, layers: u32, cfg: &ParallelConfig, tp_rank: u32) -> Result<ShardDescriptor> {
    let slice = match infer_shard_rule(meta)? {
        Some(dim) if cfg.tp > 1 => {
            let (start, end) = slice_range_of(&meta.name, &meta.shape, dim, tp_rank, cfg.tp)?;
            Slice::Range { dim, start, end }
        }
        _ => Slice::Full,
    };
    Ok(ShardDescriptor {
        param: meta.name.clone(),
        tp_rank,
        tp_size: cfg.tp,
        pp_stage: meta.pp_stage(layers, cfg.pp),
        slice,
    })
}

/// Every distinct shard of one model replica, in manifest order then TP
/// rank. Replicated parameters contribute a single copy from TP rank 0.
pub fn model_shards(m: &Manifest, cfg: &ParallelConfig) -> Result<Vec<ShardDescriptor>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for p in &m.params {
        let ranks = if infer_shard_rule(p)?.is_some() { cfg.tp } else { 1 };
        for r in 0..ranks {
            out.push(shard_of(p, m.layers, cfg, r)?);
        }
    }
    Ok(out)
}

/// Shards resident on one rank, as `(param index, descriptor)`.
pub fn local_shards(
    m: &Manifest,
    cfg: &ParallelConfig,
    tp_rank: u32,
    pp_stage: u32,
) -> Result<Vec<(usize, ShardDescriptor)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (i, p) in m.params.iter().enumerate() {
        if p.pp_stage(m.layers, cfg.pp) == pp_stage {
            out.push((i, shard_of(p, m.layers, cfg, tp_rank)?));
        }
    }
    Ok(out)
}
