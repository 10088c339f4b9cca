use acnet_numeric::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{AcnetError, Result};

/// Sample indices grouped into batches; the last batch may be partial.
/// With `shuffle`, the order is a permutation determined by `seed`.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(AcnetError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Stacks samples as-is (no augmentation) into batches.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Batch>> {
    batch_indices(dataset.len(), batch_size, seed, shuffle)?
        .into_iter()
        .map(|idx| {
            let images: Vec<Tensor> = idx.iter().map(|&i| dataset.samples[i].image.clone()).collect();
            Ok(Batch {
                images: Tensor::stack(&images).map_err(|e| AcnetError::Data(format!("cannot batch images: {e}")))?,
                labels: idx.iter().map(|&i| dataset.samples[i].label).collect(),
                indices: idx,
            })
        })
        .collect()
}
