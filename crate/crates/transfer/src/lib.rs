//! Cross-cluster weight synchronization between a training layout and a
//! serving layout.
//!
//! Training ranks publish their shards of `W_t` to a relay in fixed-size
//! buckets, either dense or as a COO-encoded delta against `W_{t-1}`.
//! Serving ranks pull only the buckets that overlap their local shards,
//! sub-slice them, and apply them in place. Both ends may run concurrently.
//!
//! Element arithmetic for deltas is done in the bit domain (wrapping), so
//! reconstruction is exact for every element type, floats included.

use std::time::Duration;

pub mod coo;
pub mod elem;
pub mod engine;
pub mod key;
pub mod manifest;
pub mod plan;
pub mod relay;
pub mod shard;
pub mod synth;
pub mod tensor;
pub mod throttle;
pub mod wire;

pub use coo::{apply_delta, sparsify, Encoded, IndexWidth, SparseDelta};
pub use elem::{DType, WeightElem};
pub use engine::{sync_step, ServingState, SyncOptions, TrainingState, TransferReport};
pub use key::{BucketKey, Codec};
pub use manifest::{infer_shard_rule, Manifest, ModuleKind, ParamMeta, Placement};
pub use plan::{plan_pulls, plan_pushes, PullPlan, ServeRank};
pub use relay::{MemoryRelay, Relay, RelayServer, RelaySession, TcpRelay};
pub use shard::{slice_range, ParallelConfig, ShardDescriptor, Slice};
pub use tensor::Tensor;
pub use throttle::TokenBucket;

/// Element type used by the benchmark and the default toy model.
pub type Weight = f32;
pub type WeightTensor = Tensor<Weight>;
pub type WeightDelta = SparseDelta<Weight>;

pub const DEFAULT_BUCKET_BYTES: usize = 64 << 20;
pub const DEFAULT_PULL_BATCH_BYTES: usize = 1 << 30;
pub const DEFAULT_DENSITY_THRESHOLD: f64 = 0.20;

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("unknown module kind {0:?}")]
    UnknownModuleKind(String),
    #[error("{param}: dimension {dim} of length {len} is not divisible by tp={tp}")]
    IndivisibleShape { param: String, dim: usize, len: usize, tp: u32 },
    #[error("unsupported parallelism: {0}")]
    UnsupportedParallelism(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid sparse delta: {0}")]
    InvalidDelta(String),
    #[error("delta index {index} falls outside the target shard")]
    IndexOutOfShard { index: u64 },
    #[error("{param}: serving rank {rank} has no source for elements [{start}, {end}) along dim {dim}")]
    IncompleteCoverage { param: String, rank: usize, dim: usize, start: usize, end: usize },
    #[error("relay timed out waiting for {key} after {waited:?}")]
    RelayTimeout { key: String, waited: Duration },
    #[error("checksum mismatch on {key}")]
    Integrity { key: String },
    #[error("malformed key {key:?}: {reason}")]
    BadKey { key: String, reason: String },
    #[error("wire protocol: {0}")]
    Wire(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TransferError> = std::result::Result<T, E>;
