//! Synthetic weights and sparse updates for tests and benchmarks.

use rand::seq::index::sample;
use rand::Rng;

use crate::elem::WeightElem;
use crate::manifest::Manifest;
use crate::tensor::Tensor;

/// One tensor per parameter, elements drawn from `draw`.
pub fn model<E: WeightElem, R: Rng>(m: &Manifest, rng: &mut R, mut draw: impl FnMut(&mut R) -> E) -> Vec<Tensor<E>> {
    m.params
        .iter()
        .map(|p| {
            let data = (0..p.numel()).map(|_| draw(rng)).collect();
            Tensor::new(p.shape.clone(), data).expect("numel matches shape")
        })
        .collect()
}

/// Copy of `prev` with exactly `round(density * numel)` elements of each
/// tensor changed by `update`. Changed elements always differ bitwise.
pub fn perturb<E: WeightElem, R: Rng>(
    prev: &[Tensor<E>],
    density: f64,
    rng: &mut R,
    mut update: impl FnMut(E, &mut R) -> E,
) -> Vec<Tensor<E>> {
    prev.iter()
        .map(|t| {
            let mut cur = t.clone();
            let n = t.numel();
            let k = ((density * n as f64).round() as usize).min(n);
            let data = cur.data_mut();
            for i in sample(rng, n, k) {
                let old = data[i];
                let mut new = update(old, rng);
                while new.bit_eq(old) {
                    new = update(old, rng);
                }
                data[i] = new;
            }
            cur
        })
        .collect()
}

/// Small-magnitude float weights.
pub fn weight_f32<R: Rng>(rng: &mut R) -> f32 {
    rng.random_range(-0.05f32..0.05)
}

/// An optimizer-step-sized nudge in float arithmetic.
pub fn nudge_f32<R: Rng>(old: f32, rng: &mut R) -> f32 {
    old + rng.random_range(-1e-3f32..1e-3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coo::SparseDelta;
    use crate::elem::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perturb_hits_exact_density() {
        let m = Manifest::toy_transformer(1, 64, 64, DType::F32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prev = model(&m, &mut rng, weight_f32);
        let cur = perturb(&prev, 0.05, &mut rng, nudge_f32);
        for (a, b) in cur.iter().zip(&prev) {
            let d = SparseDelta::diff(a, b).unwrap();
            assert_eq!(d.nnz(), (0.05 * a.numel() as f64).round() as usize);
        }
    }
}
