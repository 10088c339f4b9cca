//! Batched evaluation on a dataset split.

use acnet_numeric::{Mode, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureExtractor;
use crate::data::{augment, batch_indices, eval_transform, normalize, AugmentPolicy, Dataset, NormStats, Sample};
use crate::error::{AcnetError, Result};
use crate::tree::{Prediction, TreeModel};

/// Eval-time batch size; results do not depend on it.
pub const EVAL_BATCH: usize = 50;

/// Transforms and normalizes one sample: random augmentation when `rng` is
/// given, the deterministic center-crop path otherwise.
pub fn prepare_sample<R: Rng + ?Sized>(
    sample: &Sample,
    policy: &AugmentPolicy,
    stats: &NormStats,
    rng: Option<&mut R>,
) -> Result<Sample> {
    let s = match rng {
        Some(rng) => augment(sample, policy, rng)?,
        None => eval_transform(sample, policy)?,
    };
    normalize(&s, stats)
}

/// Eval-path images `[N, 3, crop, crop]` for the given samples.
pub fn prepare_eval_batch(dataset: &Dataset, indices: &[usize], policy: &AugmentPolicy, stats: &NormStats) -> Result<Tensor> {
    let images = indices
        .iter()
        .map(|&i| prepare_sample::<rand_chacha::ChaCha8Rng>(&dataset.samples[i], policy, stats, None).map(|s| s.image))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&images)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub top1: f64,
    /// Accuracy of each leaf's own argmax, leaves left to right.
    pub per_leaf_top1: Vec<f64>,
    /// `None` for classes without samples.
    pub per_class_top1: Vec<Option<f64>>,
}

/// Eval-mode predictions for every sample, in dataset order.
pub fn predict_dataset<B: FeatureExtractor>(
    model: &mut TreeModel<B>,
    dataset: &Dataset,
    policy: &AugmentPolicy,
    stats: &NormStats,
) -> Result<Vec<Prediction>> {
    let k = model.config().num_classes;
    if let Some(s) = dataset.samples.iter().find(|s| s.label >= k) {
        return Err(AcnetError::Input(format!("sample {} has label {} but the model has {k} classes", s.id, s.label)));
    }
    let mut out = Vec::with_capacity(dataset.len());
    for idx in batch_indices(dataset.len(), EVAL_BATCH, 0, false)? {
        let images = prepare_eval_batch(dataset, &idx, policy, stats)?;
        let pred = model.predict(&images)?;
        out.extend((0..idx.len()).map(|n| pred.sample(n)));
    }
    Ok(out)
}

/// Top-1 of the combined distribution, of each leaf alone, and per class.
pub fn evaluate<B: FeatureExtractor>(
    model: &mut TreeModel<B>,
    dataset: &Dataset,
    policy: &AugmentPolicy,
    stats: &NormStats,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(AcnetError::Data("cannot evaluate an empty dataset".into()));
    }
    let preds = predict_dataset(model, dataset, policy, stats)?;
    Ok(report(model.config().num_classes, dataset, &preds))
}

/// Aggregates single-sample predictions aligned with `dataset`.
pub fn report(num_classes: usize, dataset: &Dataset, preds: &[Prediction]) -> EvalReport {
    let leaves = preds.first().map_or(0, |p| p.leaf_probs.len());
    let mut correct = 0usize;
    let mut leaf_correct = vec![0usize; leaves];
    let mut class_total = vec![0usize; num_classes];
    let mut class_correct = vec![0usize; num_classes];
    for (s, p) in dataset.samples.iter().zip(preds) {
        let hit = p.predicted()[0] == s.label;
        correct += hit as usize;
        class_total[s.label] += 1;
        class_correct[s.label] += hit as usize;
        for (l, c) in leaf_correct.iter_mut().enumerate() {
            *c += (p.leaf_predicted(l)[0] == s.label) as usize;
        }
    }
    let n = preds.len() as f64;
    EvalReport {
        samples: preds.len(),
        top1: correct as f64 / n,
        per_leaf_top1: leaf_correct.iter().map(|&c| c as f64 / n).collect(),
        per_class_top1: class_total
            .iter()
            .zip(&class_correct)
            .map(|(&t, &c)| (t > 0).then(|| c as f64 / t as f64))
            .collect(),
    }
}

/// Classes ranked by final confidence (descending, ties by class index).
pub fn top_k(pred: &Prediction, k: usize) -> Vec<(usize, f64)> {
    let row = pred.combined.row(0);
    let mut ranked: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

/// Eval-mode prediction for a single raw image `[3, H, W]`.
pub fn predict_image<B: FeatureExtractor>(
    model: &mut TreeModel<B>,
    image: &Tensor,
    policy: &AugmentPolicy,
    stats: &NormStats,
) -> Result<Prediction> {
    let sample = Sample {
        image: image.clone(),
        label: 0,
        id: String::new(),
        glyph: None,
    };
    let s = prepare_sample::<rand_chacha::ChaCha8Rng>(&sample, policy, stats, None)?;
    let x = Tensor::stack(std::slice::from_ref(&s.image))?;
    model.forward(&x, Mode::Eval)
}
