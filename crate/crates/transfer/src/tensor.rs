use crate::elem::WeightElem;
use crate::{Result, TransferError};

/// Dense row-major tensor.
#[derive(Debug, Clone)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(outer, len, inner)` for a view of `shape` split at `dim`.
pub(crate) fn split_at_dim(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    (numel(&shape[..dim]), shape[dim], numel(&shape[dim + 1..]))
}

impl<E: WeightElem> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TransferError::ShapeMismatch { expected: shape, got: vec![data.len()] });
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: Vec<usize>, v: E) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![v; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn nbytes(&self) -> usize {
        self.data.len() * E::WIDTH
    }

    /// Copy of `[start, end)` along `dim`.
    pub fn slice(&self, dim: usize, start: usize, end: usize) -> Tensor<E> {
        let (outer, len, inner) = split_at_dim(&self.shape, dim);
        assert!(start <= end && end <= len, "slice [{start}, {end}) of {len}");
        let w = end - start;
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&self.data[base..base + w * inner]);
        }
        let mut shape = self.shape.clone();
        shape[dim] = w;
        Tensor { shape, data }
    }

    /// Writes `src` into `[at, at + src.shape[dim])` along `dim`.
    pub fn write_slice(&mut self, dim: usize, at: usize, src: &Tensor<E>) -> Result<()> {
        let (outer, len, inner) = split_at_dim(&self.shape, dim);
        let (s_outer, w, s_inner) = split_at_dim(&src.shape, dim);
        if s_outer != outer || s_inner != inner || at + w > len {
            return Err(TransferError::ShapeMismatch { expected: self.shape.clone(), got: src.shape.clone() });
        }
        for o in 0..outer {
            let dst = (o * len + at) * inner;
            self.data[dst..dst + w * inner].copy_from_slice(&src.data[o * w * inner..(o + 1) * w * inner]);
        }
        Ok(())
    }

    /// Little-endian bytes of `[start, end)` along `dim`, without an
    /// intermediate tensor.
    pub fn slice_le_bytes(&self, dim: usize, start: usize, end: usize) -> Vec<u8> {
        let (outer, len, inner) = split_at_dim(&self.shape, dim);
        assert!(start <= end && end <= len, "slice [{start}, {end}) of {len}");
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner * E::WIDTH);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            for &v in &self.data[base..base + w * inner] {
                v.put_le(&mut out);
            }
        }
        out
    }

    /// Decodes rows `[lo, hi)` along `dim` of a little-endian tensor of
    /// shape `src_shape` straight into `self`, starting at row `at`.
    pub fn write_le_rows(&mut self, dim: usize, at: usize, src_shape: &[usize], lo: usize, hi: usize, bytes: &[u8]) -> Result<()> {
        let (outer, len, inner) = split_at_dim(&self.shape, dim);
        let (s_outer, s_len, s_inner) = split_at_dim(src_shape, dim);
        if s_outer != outer || s_inner != inner || lo > hi || hi > s_len || at + (hi - lo) > len || bytes.len() != numel(src_shape) * E::WIDTH {
            return Err(TransferError::ShapeMismatch { expected: self.shape.clone(), got: src_shape.to_vec() });
        }
        let run = (hi - lo) * inner;
        for o in 0..outer {
            let src = (o * s_len + lo) * inner * E::WIDTH;
            let dst = (o * len + at) * inner;
            for (d, b) in self.data[dst..dst + run].iter_mut().zip(bytes[src..src + run * E::WIDTH].chunks_exact(E::WIDTH)) {
                *d = E::get_le(b);
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &Tensor<E>) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| a.bit_eq(*b))
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.nbytes());
        for &v in &self.data {
            v.put_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != numel(&shape) * E::WIDTH {
            return Err(TransferError::ShapeMismatch { expected: shape, got: vec![bytes.len() / E::WIDTH] });
        }
        let data = bytes.chunks_exact(E::WIDTH).map(E::get_le).collect();
        Ok(Tensor { shape, data })
    }
}
