//! Profiled latency tables: monolithic and chunked prefill latency as a
//! function of prompt length, and decode step latency as a function of
//! batch size.
//!
//! Tables are piecewise linear over sorted knots. Between knots the value is
//! interpolated; outside the knot range it is extrapolated from the two
//! nearest knots (clamped at zero below the first knot).
//!
//! # File format
//!
//! Profiles are TOML. One `[[table]]` record per (model, GPU class, kind):
//!
//! ```toml
//! schema = "latency-profile-v1"
//!
//! [[table]]
//! model_id = "qwen3-8b"
//! gpu_class = "h800"
//! kind = "prefill_chunk"       # prefill_mono | prefill_chunk | decode_step
//! chunk_tokens = 512           # prefill_chunk only
//! knots = [[512, 37400], [1024, 78100]]   # [tokens or batch, microseconds]
//! ```
//!
//! For `prefill_chunk` the table gives the *total* latency to prefill `L`
//! tokens in chunks of `chunk_tokens`; a single chunk covering context
//! positions `[a, b)` costs `table(b) - table(a)`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::time::Micros;

pub const PROFILE_SCHEMA: &str = "latency-profile-v1";

/// The profile file shipped with the crate.
pub const DEFAULT_PROFILES_TOML: &str = include_str!("../profiles/default.toml");

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("no latency profile for model `{model_id}` on gpu class `{gpu_class}`")]
    UnknownProfile { model_id: String, gpu_class: String },
    #[error("profile {model_id}/{gpu_class} has no prefill_chunk table for chunk size {chunk_tokens}")]
    MissingChunkTable { model_id: String, gpu_class: String, chunk_tokens: u32 },
    #[error("invalid table {context}: {reason}")]
    InvalidTable { context: String, reason: String },
    #[error("argument must be >= 1, got {0}")]
    ZeroArgument(u64),
    #[error("profile parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A monotone piecewise-linear table `x -> latency (us)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u64, u64)>", into = "Vec<(u64, u64)>")]
pub struct LatencyTable {
    knots: Vec<(u64, u64)>,
}

impl TryFrom<Vec<(u64, u64)>> for LatencyTable {
    type Error = CostError;

    fn try_from(knots: Vec<(u64, u64)>) -> Result<Self, Self::Error> {
        LatencyTable::new(knots)
    }
}

impl From<LatencyTable> for Vec<(u64, u64)> {
    fn from(t: LatencyTable) -> Self {
        t.knots
    }
}

impl LatencyTable {
    /// Rejects empty, unsorted, duplicated or decreasing knot lists.
    pub fn new(knots: Vec<(u64, u64)>) -> Result<Self, CostError> {
        let bad = |reason: String| CostError::InvalidTable {
            context: "knots".into(),
            reason,
        };
        if knots.is_empty() {
            return Err(bad("no knots".into()));
        }
        for w in knots.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if x1 <= x0 {
                return Err(bad(format!("x not strictly increasing at {x0} -> {x1}")));
            }
            if y1 < y0 {
                return Err(bad(format!("latency decreases from {y0} at {x0} to {y1} at {x1}")));
            }
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[(u64, u64)] {
        &self.knots
    }

    /// Interpolated latency at `x`, rounded to the nearest microsecond.
    pub fn eval(&self, x: u64) -> Micros {
        let k = &self.knots;
        if k.len() == 1 {
            return k[0].1;
        }
        let idx = k.partition_point(|&(kx, _)| kx <= x);
        let (a, b) = if idx == 0 {
            (k[0], k[1])
        } else if idx >= k.len() {
            (k[k.len() - 2], k[k.len() - 1])
        } else {
            if k[idx - 1].0 == x {
                return k[idx - 1].1;
            }
            (k[idx - 1], k[idx])
        };
        let (x0, y0) = (a.0 as i128, a.1 as i128);
        let (x1, y1) = (b.0 as i128, b.1 as i128);
        let num = (y1 - y0) * (x as i128 - x0);
        let den = x1 - x0;
        let y = y0 + div_round(num, den);
        y.max(0) as Micros
    }
}

fn div_round(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    if num >= 0 {
        (num + den / 2) / den
    } else {
        -((-num + den / 2) / den)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefillMode {
    Mono,
    Chunk { chunk_tokens: u32 },
}

/// Latency tables for one model on one GPU class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatencyProfile {
    pub model_id: String,
    pub gpu_class: String,
    pub prefill_mono: LatencyTable,
    pub prefill_chunk: BTreeMap<u32, LatencyTable>,
    pub decode_step: LatencyTable,
}

impl LatencyProfile {
    fn chunk_table(&self, chunk_tokens: u32) -> Result<&LatencyTable, CostError> {
        self.prefill_chunk
            .get(&chunk_tokens)
            .ok_or_else(|| CostError::MissingChunkTable {
                model_id: self.model_id.clone(),
                gpu_class: self.gpu_class.clone(),
                chunk_tokens,
            })
    }

    /// Total latency to prefill `prompt_tokens` tokens.
    pub fn prefill_latency(&self, prompt_tokens: u64, mode: PrefillMode) -> Result<Micros, CostError> {
        if prompt_tokens == 0 {
            return Err(CostError::ZeroArgument(0));
        }
        match mode {
            PrefillMode::Mono => Ok(self.prefill_mono.eval(prompt_tokens)),
            PrefillMode::Chunk { chunk_tokens } => {
                if chunk_tokens == 0 {
                    return Err(CostError::ZeroArgument(0));
                }
                Ok(self.chunk_table(chunk_tokens)?.eval(prompt_tokens))
            }
        }
    }

    /// Cost of one chunk extending a context from `start` to `end` tokens.
    pub fn chunk_cost(&self, chunk_tokens: u32, start: u64, end: u64) -> Result<Micros, CostError> {
        debug_assert!(end > start);
        let t = self.chunk_table(chunk_tokens)?;
        let lo = if start == 0 { 0 } else { t.eval(start) };
        Ok(t.eval(end).saturating_sub(lo))
    }

    pub fn decode_step_latency(&self, batch: u64) -> Result<Micros, CostError> {
        if batch == 0 {
            return Err(CostError::ZeroArgument(0));
        }
        Ok(self.decode_step.eval(batch))
    }

    /// Checks the chunked-never-cheaper-than-monolithic invariant at every
    /// knot of either table and on the extrapolated tail.
    fn validate(&self) -> Result<(), CostError> {
        for (&c, table) in &self.prefill_chunk {
            let mut xs: Vec<u64> = table
                .knots()
                .iter()
                .chain(self.prefill_mono.knots())
                .map(|k| k.0)
                .collect();
            xs.sort_unstable();
            xs.dedup();
            let last = *xs.last().unwrap();
            xs.push(last * 2);
            for x in xs {
                if table.eval(x) < self.prefill_mono.eval(x) {
                    return Err(CostError::InvalidTable {
                        context: format!("{}/{} prefill_chunk[{c}]", self.model_id, self.gpu_class),
                        reason: format!("chunked prefill cheaper than monolithic at L={x}"),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    PrefillMono,
    PrefillChunk,
    DecodeStep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableRecord {
    model_id: String,
    gpu_class: String,
    kind: TableKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chunk_tokens: Option<u32>,
    knots: LatencyTable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    schema: String,
    table: Vec<TableRecord>,
}

/// Every profile available to a simulation, keyed by (model, GPU class).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProfileSet {
    profiles: BTreeMap<(String, String), LatencyProfile>,
}

impl ProfileSet {
    pub fn bundled() -> Self {
        Self::from_toml(DEFAULT_PROFILES_TOML).expect("bundled profile file is valid")
    }

    pub fn load(path: &Path) -> Result<Self, CostError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml(text: &str) -> Result<Self, CostError> {
        let file: ProfileFile = toml::from_str(text).map_err(|e| CostError::Parse(e.to_string()))?;
        if file.schema != PROFILE_SCHEMA {
            return Err(CostError::Parse(format!(
                "unsupported schema `{}`, expected `{PROFILE_SCHEMA}`",
                file.schema
            )));
        }
        #[derive(Default)]
        struct Partial {
            mono: Option<LatencyTable>,
            chunk: BTreeMap<u32, LatencyTable>,
            decode: Option<LatencyTable>,
        }
        let mut parts: BTreeMap<(String, String), Partial> = BTreeMap::new();
        for rec in file.table {
            let ctx = format!("{}/{} {:?}", rec.model_id, rec.gpu_class, rec.kind);
            let dup = || CostError::Parse(format!("duplicate table {ctx}"));
            let p = parts.entry((rec.model_id.clone(), rec.gpu_class.clone())).or_default();
            match rec.kind {
                TableKind::PrefillMono => {
                    if p.mono.replace(rec.knots).is_some() {
                        return Err(dup());
                    }
                }
                TableKind::DecodeStep => {
                    if p.decode.replace(rec.knots).is_some() {
                        return Err(dup());
                    }
                }
                TableKind::PrefillChunk => {
                    let c = rec
                        .chunk_tokens
                        .filter(|&c| c > 0)
                        .ok_or_else(|| CostError::Parse(format!("{ctx}: chunk_tokens missing or zero")))?;
                    if p.chunk.insert(c, rec.knots).is_some() {
                        return Err(dup());
                    }
                }
            }
        }
        let mut profiles = BTreeMap::new();
        for ((model_id, gpu_class), p) in parts {
            let missing = |what: &str| CostError::Parse(format!("{model_id}/{gpu_class}: missing {what} table"));
            let profile = LatencyProfile {
                prefill_mono: p.mono.ok_or_else(|| missing("prefill_mono"))?,
                decode_step: p.decode.ok_or_else(|| missing("decode_step"))?,
                prefill_chunk: p.chunk,
                model_id: model_id.clone(),
                gpu_class: gpu_class.clone(),
            };
            profile.validate()?;
            profiles.insert((model_id, gpu_class), profile);
        }
        Ok(Self { profiles })
    }

    pub fn to_toml(&self) -> String {
        let mut table = Vec::new();
        for p in self.profiles.values() {
            let rec = |kind, chunk_tokens, knots: &LatencyTable| TableRecord {
                model_id: p.model_id.clone(),
                gpu_class: p.gpu_class.clone(),
                kind,
                chunk_tokens,
                knots: knots.clone(),
            };
            table.push(rec(TableKind::PrefillMono, None, &p.prefill_mono));
            for (&c, t) in &p.prefill_chunk {
                table.push(rec(TableKind::PrefillChunk, Some(c), t));
            }
            table.push(rec(TableKind::DecodeStep, None, &p.decode_step));
        }
        toml::to_string(&ProfileFile {
            schema: PROFILE_SCHEMA.into(),
            table,
        })
        .expect("profile serialization")
    }

    pub fn insert(&mut self, profile: LatencyProfile) -> Result<(), CostError> {
        profile.validate()?;
        self.profiles
            .insert((profile.model_id.clone(), profile.gpu_class.clone()), profile);
        Ok(())
    }

    pub fn get(&self, model_id: &str, gpu_class: &str) -> Result<&LatencyProfile, CostError> {
        self.profiles
            .get(&(model_id.to_string(), gpu_class.to_string()))
            .ok_or_else(|| CostError::UnknownProfile {
                model_id: model_id.into(),
                gpu_class: gpu_class.into(),
            })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}
