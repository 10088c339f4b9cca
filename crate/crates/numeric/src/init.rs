use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Half-width of the xavier uniform range.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Draws every element uniformly from `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    assert!(fan_in >= 1 && fan_out >= 1, "fans must be positive");
    let a = xavier_bound(fan_in, fan_out);
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

/// Seeded variant of [`xavier_uniform`].
pub fn xavier_init(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> Tensor {
    xavier_uniform(shape, fan_in, fan_out, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_matches_glorot() {
        let (fi, fo) = (30, 50);
        let t = xavier_init(&[100_000], fi, fo, 11);
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / (fi + fo) as f64;
        assert!((var - want).abs() / want < 0.05, "var {var} vs {want}");
        let bound = xavier_bound(fi, fo);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = xavier_init(&[64], 3, 4, 5);
        let b = xavier_init(&[64], 3, 4, 5);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&xavier_init(&[64], 3, 4, 6)));
    }
}
