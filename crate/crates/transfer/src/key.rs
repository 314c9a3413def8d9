//! Bucket keys carry everything a puller needs to place a payload:
//!
//! ```text
//! s{step}/{param}/tp{rank}of{size}/pp{stage}/{slice}/{codec}/{seq}of{total}
//! slice = full | d{dim}:{start}-{end}
//! codec = dense-{dtype} | coo-{dtype}-i{32|64}-n{nnz}
//! ```
//!
//! `%` and `/` in parameter names are percent-escaped. `nnz` counts the
//! whole shard, so every bucket of a shard differs only in `seq`.

use std::fmt;
use std::str::FromStr;

use crate::coo::IndexWidth;
use crate::elem::DType;
use crate::shard::{ShardDescriptor, Slice};
use crate::TransferError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Codec {
    Dense { dtype: DType },
    Coo { dtype: DType, index_width: IndexWidth, nnz: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BucketKey {
    pub step: u64,
    pub shard: ShardDescriptor,
    pub codec: Codec,
    pub seq: u32,
    pub total: u32,
}

pub fn step_prefix(step: u64) -> String {
    format!("s{step}/")
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' => out.push_str("%25"),
            '/' => out.push_str("%2F"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('%') {
        out.push_str(&rest[..i]);
        match rest.get(i + 1..i + 3)? {
            "25" => out.push('%'),
            "2F" => out.push('/'),
            _ => return None,
        }
        rest = &rest[i + 3..];
    }
    out.push_str(rest);
    Some(out)
}

impl BucketKey {
    /// All keys of one shard share this prefix; `seq` follows it.
    pub fn shard_prefix(&self) -> String {
        let s = self.to_string();
        let cut = s.rfind('/').expect("key has fields");
        s[..=cut].to_string()
    }

    pub fn with_seq(&self, seq: u32) -> BucketKey {
        BucketKey { seq, ..self.clone() }
    }
}

impl fmt::Display for BucketKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sh = &self.shard;
        write!(f, "s{}/{}/tp{}of{}/pp{}/", self.step, escape(&sh.param), sh.tp_rank, sh.tp_size, sh.pp_stage)?;
        match sh.slice {
            Slice::Full => f.write_str("full/")?,
            Slice::Range { dim, start, end } => write!(f, "d{dim}:{start}-{end}/")?,
        }
        match self.codec {
            Codec::Dense { dtype } => write!(f, "dense-{}", dtype.as_str())?,
            Codec::Coo { dtype, index_width, nnz } => {
                write!(f, "coo-{}-i{}-n{nnz}", dtype.as_str(), index_width.bytes() * 8)?
            }
        }
        write!(f, "/{}of{}", self.seq, self.total)
    }
}

fn pair<A: FromStr, B: FromStr>(s: &str, sep: &str) -> Option<(A, B)> {
    let (a, b) = s.split_once(sep)?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

fn parse_slice(s: &str) -> Option<Slice> {
    if s == "full" {
        return Some(Slice::Full);
    }
    let (dim, range) = s.strip_prefix('d')?.split_once(':')?;
    let (start, end) = pair(range, "-")?;
    Some(Slice::Range { dim: dim.parse().ok()?, start, end })
}

fn parse_codec(s: &str) -> Option<Codec> {
    let mut it = s.split('-');
    let kind = it.next()?;
    let dtype = it.next()?.parse().ok()?;
    let codec = match kind {
        "dense" => Codec::Dense { dtype },
        "coo" => {
            let index_width = match it.next()? {
                "i32" => IndexWidth::U32,
                "i64" => IndexWidth::U64,
                _ => return None,
            };
            let nnz = it.next()?.strip_prefix('n')?.parse().ok()?;
            Codec::Coo { dtype, index_width, nnz }
        }
        _ => return None,
    };
    it.next().is_none().then_some(codec)
}

impl FromStr for BucketKey {
    type Err = TransferError;

    fn from_str(key: &str) -> Result<Self, TransferError> {
        let bad = |reason: &str| TransferError::BadKey { key: key.to_string(), reason: reason.to_string() };
        let parts: Vec<&str> = key.split('/').collect();
        let [step, param, tp, pp, slice, codec, seq] = parts[..] else {
            return Err(bad("expected 7 '/'-separated fields"));
        };
        let step = step.strip_prefix('s').and_then(|s| s.parse().ok()).ok_or_else(|| bad("step"))?;
        let param = unescape(param).ok_or_else(|| bad("parameter escape"))?;
        let (tp_rank, tp_size) = tp.strip_prefix("tp").and_then(|s| pair(s, "of")).ok_or_else(|| bad("tp field"))?;
        let pp_stage = pp.strip_prefix("pp").and_then(|s| s.parse().ok()).ok_or_else(|| bad("pp field"))?;
        let slice = parse_slice(slice).ok_or_else(|| bad("slice"))?;
        let codec = parse_codec(codec).ok_or_else(|| bad("codec"))?;
        let (seq, total) = pair(seq, "of").ok_or_else(|| bad("sequence"))?;
        if tp_rank >= tp_size {
            return Err(bad("tp rank out of range"));
        }
        if let Slice::Range { start, end, .. } = slice {
            if start >= end {
                return Err(bad("empty slice"));
            }
        }
        if seq >= total {
            return Err(bad("sequence out of range"));
        }
        let k = BucketKey { step, shard: ShardDescriptor { param, tp_rank, tp_size, pp_stage, slice }, codec, seq, total };
        // reject non-canonical spellings such as leading zeros
        if k.to_string() != key {
            return Err(bad("not in canonical form"));
        }
        Ok(k)
    }
}
