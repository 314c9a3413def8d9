use std::collections::HashSet;
use std::str::FromStr;

use crate::elem::DType;
use crate::tensor::numel;
use crate::{Result, TransferError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModuleKind {
    ColumnShardedLinear,
    RowShardedLinear,
    Embedding,
    Norm,
    Replicated,
}

impl FromStr for ModuleKind {
    type Err = TransferError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "column" | "ColumnShardedLinear" => ModuleKind::ColumnShardedLinear,
            "row" | "RowShardedLinear" => ModuleKind::RowShardedLinear,
            "embedding" | "Embedding" => ModuleKind::Embedding,
            "norm" | "Norm" => ModuleKind::Norm,
            "replicated" | "Replicated" => ModuleKind::Replicated,
            _ => return Err(TransferError::UnknownModuleKind(s.to_string())),
        })
    }
}

/// Where a parameter sits in the layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    /// Before layer 0, e.g. the token embedding. Always on the first stage.
    First,
    Layer(u32),
    /// After the last layer, e.g. the final norm and LM head.
    Last,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: String,
    pub kind: ModuleKind,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub placement: Placement,
}

impl ParamMeta {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn nbytes(&self) -> usize {
        self.numel() * self.dtype.width()
    }

    pub fn pp_stage(&self, layers: u32, pp: u32) -> u32 {
        match self.placement {
            Placement::First => 0,
            Placement::Layer(l) => pp_stage_of(l, layers, pp),
            Placement::Last => pp - 1,
        }
    }
}

/// The dimension TP shards along, or `None` for replicated parameters.
pub fn infer_shard_rule(meta: &ParamMeta) -> Result<Option<usize>> {
    let dim = match meta.kind {
        ModuleKind::ColumnShardedLinear | ModuleKind::Embedding => Some(0),
        ModuleKind::RowShardedLinear => Some(1),
        ModuleKind::Norm | ModuleKind::Replicated => None,
    };
    if let Some(d) = dim {
        if d >= meta.shape.len() {
            return Err(TransferError::InvalidConfig(format!(
                "{}: {:?} needs rank > {d}, shape is {:?}",
                meta.name, meta.kind, meta.shape
            )));
        }
    }
    Ok(dim)
}

/// Contiguous blocks of layers per stage; when `layers % pp != 0` the
/// earlier stages take one extra layer each.
pub fn pp_stage_of(layer: u32, layers: u32, pp: u32) -> u32 {
    assert!(pp > 0 && layer < layers);
    let (base, rem) = (layers / pp, layers % pp);
    let big = rem * (base + 1);
    if layer < big {
        layer / (base + 1)
    } else {
        rem + (layer - big) / base
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub layers: u32,
    pub params: Vec<ParamMeta>,
}

impl Manifest {
    pub fn new(layers: u32, params: Vec<ParamMeta>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &params {
            if !seen.insert(p.name.as_str()) {
                return Err(TransferError::InvalidConfig(format!("duplicate parameter {}", p.name)));
            }
            if let Placement::Layer(l) = p.placement {
                if l >= layers {
                    return Err(TransferError::InvalidConfig(format!("{}: layer {l} >= {layers}", p.name)));
                }
            }
            if p.shape.is_empty() || p.shape.contains(&0) {
                return Err(TransferError::InvalidConfig(format!("{}: empty shape {:?}", p.name, p.shape)));
            }
            infer_shard_rule(p)?;
        }
        Ok(Manifest { layers, params })
    }

    /// Decoder-only stand-in: embedding, per-layer attention and MLP blocks,
    /// final norm and LM head.
    pub fn toy_transformer(layers: u32, hidden: usize, vocab: usize, dtype: DType) -> Result<Self> {
        use ModuleKind::*;
        let p = |name: String, kind, shape: Vec<usize>, placement| ParamMeta { name, kind, shape, dtype, placement };
        let mut params = vec![p("embed_tokens".into(), Embedding, vec![vocab, hidden], Placement::First)];
        for l in 0..layers {
            let at = Placement::Layer(l);
            let n = |s: &str| format!("layers.{l}.{s}");
            params.push(p(n("attn_norm"), Norm, vec![hidden], at));
            params.push(p(n("attn.qkv_proj"), ColumnShardedLinear, vec![3 * hidden, hidden], at));
            params.push(p(n("attn.o_proj"), RowShardedLinear, vec![hidden, hidden], at));
            params.push(p(n("mlp_norm"), Norm, vec![hidden], at));
            params.push(p(n("mlp.up_proj"), ColumnShardedLinear, vec![4 * hidden, hidden], at));
            params.push(p(n("mlp.down_proj"), RowShardedLinear, vec![hidden, 4 * hidden], at));
        }
        params.push(p("final_norm".into(), Norm, vec![hidden], Placement::Last));
        params.push(p("lm_head".into(), ColumnShardedLinear, vec![vocab, hidden], Placement::Last));
        Manifest::new(layers, params)
    }

    pub fn nbytes(&self) -> usize {
        self.params.iter().map(ParamMeta::nbytes).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }
}
