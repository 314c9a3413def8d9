//! Lossless COO encoding of weight deltas.
//!
//! Payload layout: `nnz` interleaved entries `[index][value]`, little-endian.
//! Indices are flat row-major offsets into the shard, `u32` when the shard
//! has fewer than 2^32 elements and `u64` otherwise, so the payload is
//! exactly `nnz * (index_width + value_width)` bytes.

use crate::elem::WeightElem;
use crate::shard::Slice;
use crate::tensor::{numel, split_at_dim, Tensor};
use crate::{Result, TransferError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IndexWidth {
    U32,
    U64,
}

impl IndexWidth {
    pub fn for_numel(n: usize) -> Self {
        if (n as u64) < (1u64 << 32) {
            IndexWidth::U32
        } else {
            IndexWidth::U64
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            IndexWidth::U32 => 4,
            IndexWidth::U64 => 8,
        }
    }
}

/// Nonzero entries of `W_t - W_prev` over one shard. Indices are strictly
/// increasing and below `numel(shape)`.
#[derive(Debug, Clone)]
pub struct SparseDelta<E> {
    shape: Vec<usize>,
    indices: Vec<u64>,
    values: Vec<E>,
}

impl<E: WeightElem> SparseDelta<E> {
    pub fn new(shape: Vec<usize>, indices: Vec<u64>, values: Vec<E>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(TransferError::InvalidDelta(format!("{} indices, {} values", indices.len(), values.len())));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TransferError::InvalidDelta("indices not strictly increasing".into()));
        }
        if let Some(&last) = indices.last() {
            if last >= numel(&shape) as u64 {
                return Err(TransferError::InvalidDelta(format!("index {last} out of {}", numel(&shape))));
            }
        }
        Ok(SparseDelta { shape, indices, values })
    }

    /// `cur - prev`, elementwise in the bit domain.
    pub fn diff(cur: &Tensor<E>, prev: &Tensor<E>) -> Result<Self> {
        check_shapes(cur, prev)?;
        let (indices, values) = nonzero(cur.data(), prev.data(), usize::MAX).expect("unbounded");
        Ok(SparseDelta { shape: cur.shape().to_vec(), indices, values })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn values(&self) -> &[E] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn index_width(&self) -> IndexWidth {
        IndexWidth::for_numel(numel(&self.shape))
    }

    pub fn entry_bytes(&self) -> usize {
        self.index_width().bytes() + E::WIDTH
    }

    pub fn encoded_len(&self) -> usize {
        self.nnz() * self.entry_bytes()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        let wide = self.index_width() == IndexWidth::U64;
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            if wide {
                out.extend_from_slice(&i.to_le_bytes());
            } else {
                out.extend_from_slice(&(i as u32).to_le_bytes());
            }
            v.put_le(&mut out);
        }
        out
    }

    pub fn decode(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let iw = IndexWidth::for_numel(numel(&shape)).bytes();
        let entry = iw + E::WIDTH;
        if bytes.len() % entry != 0 {
            return Err(TransferError::InvalidDelta(format!("{} bytes is not a whole number of {entry}-byte entries", bytes.len())));
        }
        let n = bytes.len() / entry;
        let mut indices = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for e in bytes.chunks_exact(entry) {
            let i = if iw == 8 {
                u64::from_le_bytes(e[..8].try_into().expect("8"))
            } else {
                u32::from_le_bytes(e[..4].try_into().expect("4")) as u64
            };
            indices.push(i);
            values.push(E::get_le(&e[iw..]));
        }
        Self::new(shape, indices, values)
    }

    /// Entries with `dim` coordinate in `[lo, hi)`, rebased to that range.
    pub fn sub_slice(&self, dim: usize, lo: usize, hi: usize) -> SparseDelta<E> {
        let (_, len, inner) = split_at_dim(&self.shape, dim);
        assert!(lo <= hi && hi <= len);
        let w = hi - lo;
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            let i = i as usize;
            let (o, rem) = (i / (len * inner), i % (len * inner));
            let (k, x) = (rem / inner, rem % inner);
            if (lo..hi).contains(&k) {
                indices.push(((o * w + k - lo) * inner + x) as u64);
                values.push(v);
            }
        }
        let mut shape = self.shape.clone();
        shape[dim] = w;
        SparseDelta { shape, indices, values }
    }
}

/// What a training rank publishes for one shard.
#[derive(Debug, Clone)]
pub enum Encoded<E> {
    SparseCoo(SparseDelta<E>),
    /// `W_t` itself, when the delta is too dense to pay off.
    DenseFallback(Tensor<E>),
}

impl<E: WeightElem> Encoded<E> {
    pub fn payload(&self) -> Vec<u8> {
        match self {
            Encoded::SparseCoo(d) => d.encode(),
            Encoded::DenseFallback(t) => t.to_le_bytes(),
        }
    }

    pub fn payload_len(&self) -> usize {
        match self {
            Encoded::SparseCoo(d) => d.encoded_len(),
            Encoded::DenseFallback(t) => t.nbytes(),
        }
    }

    /// Unit the payload may be split on without cutting an element.
    pub fn entry_bytes(&self) -> usize {
        match self {
            Encoded::SparseCoo(d) => d.entry_bytes(),
            Encoded::DenseFallback(_) => E::WIDTH,
        }
    }
}

fn check_shapes<E: WeightElem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TransferError::ShapeMismatch { expected: a.shape().to_vec(), got: b.shape().to_vec() });
    }
    Ok(())
}

/// Nonzero delta entries, or `None` once more than `limit` are found.
fn nonzero<E: WeightElem>(cur: &[E], prev: &[E], limit: usize) -> Option<(Vec<u64>, Vec<E>)> {
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (i, (&c, &p)) in cur.iter().zip(prev).enumerate() {
        let d = E::delta(c, p);
        if !d.is_zero_delta() {
            if indices.len() == limit {
                return None;
            }
            indices.push(i as u64);
            values.push(d);
        }
    }
    Some((indices, values))
}

/// COO delta when `nnz / size <= density_threshold`, else `W_t` dense.
pub fn sparsify<E: WeightElem>(cur: &Tensor<E>, prev: &Tensor<E>, density_threshold: f64) -> Result<Encoded<E>> {
    check_shapes(cur, prev)?;
    let limit = (density_threshold * cur.numel() as f64).floor() as usize;
    Ok(match nonzero(cur.data(), prev.data(), limit) {
        Some((indices, values)) => {
            Encoded::SparseCoo(SparseDelta { shape: cur.shape().to_vec(), indices, values })
        }
        None => Encoded::DenseFallback(cur.clone()),
    })
}

fn common_dim(a: Slice, b: Slice) -> Result<Option<usize>> {
    match (a, b) {
        (Slice::Range { dim: x, .. }, Slice::Range { dim: y, .. }) if x != y => {
            Err(TransferError::InvalidDelta(format!("slices along different dims {x} and {y}")))
        }
        (Slice::Range { dim, .. }, _) | (_, Slice::Range { dim, .. }) => Ok(Some(dim)),
        _ => Ok(None),
    }
}

fn offset(s: Slice) -> usize {
    match s {
        Slice::Full => 0,
        Slice::Range { start, .. } => start,
    }
}

/// Adds `delta`, which covers `delta_slice` of the full tensor, into the
/// shard `target` covering `target_slice`. Touches only listed elements and
/// leaves `target` unchanged on error.
pub fn apply_delta<E: WeightElem>(
    target: &mut Tensor<E>,
    target_slice: Slice,
    delta: &SparseDelta<E>,
    delta_slice: Slice,
) -> Result<()> {
    let Some(dim) = common_dim(target_slice, delta_slice)? else {
        check_delta_shape(target.shape(), delta.shape(), None)?;
        let n = target.numel() as u64;
        if let Some(&bad) = delta.indices.iter().find(|&&i| i >= n) {
            return Err(TransferError::IndexOutOfShard { index: bad });
        }
        let data = target.data_mut();
        for (&i, &v) in delta.indices.iter().zip(&delta.values) {
            data[i as usize] = E::apply(data[i as usize], v);
        }
        return Ok(());
    };
    check_delta_shape(target.shape(), delta.shape(), Some(dim))?;
    let (_, d_len, inner) = split_at_dim(delta.shape(), dim);
    let t_len = target.shape()[dim];
    let (d_off, t_off) = (offset(delta_slice), offset(target_slice));
    let remap = |i: u64| -> Option<usize> {
        let i = i as usize;
        let (o, rem) = (i / (d_len * inner), i % (d_len * inner));
        let k = rem / inner + d_off;
        if k < t_off || k - t_off >= t_len {
            return None;
        }
        Some((o * t_len + k - t_off) * inner + rem % inner)
    };
    if let Some(&bad) = delta.indices.iter().find(|&&i| remap(i).is_none()) {
        return Err(TransferError::IndexOutOfShard { index: bad });
    }
    let data = target.data_mut();
    for (&i, &v) in delta.indices.iter().zip(&delta.values) {
        let j = remap(i).expect("validated");
        data[j] = E::apply(data[j], v);
    }
    Ok(())
}

fn check_delta_shape(target: &[usize], delta: &[usize], dim: Option<usize>) -> Result<()> {
    let ok = target.len() == delta.len()
        && target.iter().zip(delta).enumerate().all(|(d, (a, b))| Some(d) == dim || a == b);
    if !ok {
        return Err(TransferError::ShapeMismatch { expected: target.to_vec(), got: delta.to_vec() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<i32>) -> Tensor<i32> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn zero_delta_is_empty_coo() {
        let a = t(vec![4], vec![1, 2, 3, 4]);
        match sparsify(&a, &a, 0.2).unwrap() {
            Encoded::SparseCoo(d) => {
                assert_eq!(d.nnz(), 0);
                assert!(d.encode().is_empty());
            }
            Encoded::DenseFallback(_) => panic!("expected COO"),
        }
    }

    #[test]
    fn threshold_is_inclusive() {
        let prev = t(vec![10], vec![0; 10]);
        let mut cur = prev.clone();
        cur.data_mut()[3] = 7;
        cur.data_mut()[8] = -1;
        assert!(matches!(sparsify(&cur, &prev, 0.2).unwrap(), Encoded::SparseCoo(_)));
        cur.data_mut()[0] = 1;
        assert!(matches!(sparsify(&cur, &prev, 0.2).unwrap(), Encoded::DenseFallback(_)));
        assert!(sparsify(&cur, &t(vec![5, 2], vec![0; 10]), 0.2).is_err());
    }

    #[test]
    fn encode_decode_exact_bytes() {
        let d = SparseDelta::new(vec![3, 5], vec![0, 7, 14], vec![-1i32, 5, i32::MAX]).unwrap();
        let b = d.encode();
        assert_eq!(b.len(), 3 * (4 + 4));
        assert_eq!(&b[8..16], &[7, 0, 0, 0, 5, 0, 0, 0]);
        let back = SparseDelta::<i32>::decode(vec![3, 5], &b).unwrap();
        assert_eq!(back.indices(), d.indices());
        assert_eq!(back.values(), d.values());
        assert!(SparseDelta::<i32>::decode(vec![3, 5], &b[..7]).is_err());
        assert!(SparseDelta::new(vec![3], vec![2, 1], vec![1i32, 1]).is_err());
        assert!(SparseDelta::new(vec![3], vec![3], vec![1i32]).is_err());
    }

    #[test]
    fn unit_delta_changes_one_element() {
        let prev = t(vec![2, 3], vec![1, 2, 3, 4, 5, 6]);
        let mut w = prev.clone();
        let d = SparseDelta::new(vec![2, 3], vec![4], vec![10]).unwrap();
        apply_delta(&mut w, Slice::Full, &d, Slice::Full).unwrap();
        assert_eq!(w.data(), &[1, 2, 3, 4, 15, 6]);
        let empty = SparseDelta::new(vec![2, 3], vec![], vec![]).unwrap();
        let mut w2 = prev.clone();
        apply_delta(&mut w2, Slice::Full, &empty, Slice::Full).unwrap();
        assert!(w2.bit_eq(&prev));
    }

    #[test]
    fn offsets_remap_between_slices() {
        // full tensor 2 x 8, delta over columns [2, 6), target over [4, 8)
        let ds = Slice::Range { dim: 1, start: 2, end: 6 };
        let ts = Slice::Range { dim: 1, start: 4, end: 8 };
        let d = SparseDelta::new(vec![2, 4], vec![2, 7], vec![1i32, 2]).unwrap();
        let mut w = t(vec![2, 4], vec![0; 8]);
        apply_delta(&mut w, ts, &d, ds).unwrap();
        // index 2 -> (row 0, col 4) -> target col 0; index 7 -> (row 1, col 5) -> target col 1
        assert_eq!(w.data(), &[1, 0, 0, 0, 0, 2, 0, 0]);
        let outside = SparseDelta::new(vec![2, 4], vec![0, 2], vec![1i32, 1]).unwrap();
        let before = w.clone();
        assert!(matches!(apply_delta(&mut w, ts, &outside, ds), Err(TransferError::IndexOutOfShard { index: 0 })));
        assert!(w.bit_eq(&before));
        let sub = outside.sub_slice(1, 2, 4);
        assert_eq!(sub.indices(), &[0]);
        apply_delta(&mut w, ts, &sub, Slice::Range { dim: 1, start: 4, end: 6 }).unwrap();
        assert_eq!(w.data()[0], 2);
    }
}
