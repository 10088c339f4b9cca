use std::io::Write;

use acnet_numeric::{argmax, Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::total_loss_tape;
use super::plan::TrainPlan;
use super::sgd::Sgd;
use crate::backbone::FeatureExtractor;
use crate::data::{batch_indices, AugmentPolicy, Dataset, NormStats};
use crate::error::{AcnetError, Result};
use crate::eval::{evaluate, prepare_sample};
use crate::tree::TreeModel;

/// Metrics of one epoch; stages and epochs are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's training samples.
    pub train_loss: f64,
    /// Running accuracy over the epoch's (augmented, train-mode) batches.
    pub train_top1: f64,
    pub val_top1: f64,
    pub leaf_top1: Vec<f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch records always serialize")
    }
}

/// Receives per-epoch metrics and stage boundaries during training.
pub trait TrainObserver<B: FeatureExtractor> {
    fn epoch_end(&mut self, record: &EpochRecord, model: &TreeModel<B>) -> Result<()>;

    /// Called after stage `stage` (1-based) finishes.
    fn stage_end(&mut self, _stage: usize, _model: &TreeModel<B>) -> Result<()> {
        Ok(())
    }
}

impl<B: FeatureExtractor> TrainObserver<B> for Vec<EpochRecord> {
    fn epoch_end(&mut self, record: &EpochRecord, _model: &TreeModel<B>) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonLines<W: Write>(pub W);

impl<W: Write, B: FeatureExtractor> TrainObserver<B> for JsonLines<W> {
    fn epoch_end(&mut self, record: &EpochRecord, _model: &TreeModel<B>) -> Result<()> {
        writeln!(self.0, "{}", record.to_json_line())
            .and_then(|_| self.0.flush())
            .map_err(|e| AcnetError::io("metrics", e))
    }
}

/// Data and preprocessing shared by every stage.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub policy: AugmentPolicy,
    pub stats: &'a NormStats,
}

fn epoch_rng(seed: u64, stage: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | epoch as u64);
    rng
}

/// Runs the plan's stages from `start_stage` (0-based) on. Each stage sets
/// the backbone freeze flag and starts with fresh momentum; every epoch
/// draws its shuffling and augmentation from a stream determined by
/// `(seed, stage, epoch)` alone, so resuming at a stage boundary reproduces
/// an uninterrupted run.
pub fn fit_two_stage<B, O>(
    model: &mut TreeModel<B>,
    data: TrainData<'_>,
    plan: &TrainPlan,
    start_stage: usize,
    observer: &mut O,
) -> Result<Vec<EpochRecord>>
where
    B: FeatureExtractor,
    O: TrainObserver<B> + ?Sized,
{
    plan.validate()?;
    data.policy.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(AcnetError::Data("training needs non-empty train and test splits".into()));
    }
    if start_stage > plan.stages.len() {
        return Err(AcnetError::Config(format!(
            "cannot start at stage {} of a {}-stage plan",
            start_stage + 1,
            plan.stages.len()
        )));
    }
    let k = model.config().num_classes;
    if let Some(s) = data.train.samples.iter().find(|s| s.label >= k) {
        return Err(AcnetError::Input(format!("sample {} has label {} but the model has {k} classes", s.id, s.label)));
    }

    let mut records = Vec::new();
    let mut sgd = Sgd::new();
    for (si, stage) in plan.stages.iter().enumerate().skip(start_stage) {
        model.set_backbone_frozen(stage.freeze_backbone);
        sgd.reset();
        for epoch in 1..=stage.epochs {
            let lr = stage.lr_at(epoch);
            let mut rng = epoch_rng(plan.seed, si, epoch);
            let order = batch_indices(data.train.len(), stage.batch_size, rng.random(), true)?;
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for (bi, idx) in order.iter().enumerate() {
                let mut images = Vec::with_capacity(idx.len());
                let mut labels = Vec::with_capacity(idx.len());
                for &i in idx {
                    let s = prepare_sample(&data.train.samples[i], &data.policy, data.stats, Some(&mut rng))?;
                    images.push(s.image);
                    labels.push(s.label);
                }
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::stack(&images)?);
                let trace = model.forward_tape(&mut tape, x, Mode::Train)?;
                let loss = total_loss_tape(&mut tape, &trace, &labels)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    let op = tape.first_non_finite().map_or("unknown", |(_, op)| op);
                    return Err(AcnetError::NonFiniteLoss {
                        stage: si + 1,
                        epoch,
                        batch: bi,
                        op: op.to_string(),
                    });
                }
                tape.backward(loss)?;
                model.zero_grads();
                model.collect_grads(&tape)?;
                sgd.step(&mut model.stores_mut(), lr, plan.momentum, stage.weight_decay);

                loss_sum += value * idx.len() as f64;
                let c = tape.value(trace.combined);
                correct += labels.iter().enumerate().filter(|&(n, &y)| argmax(c.row(n)) == y).count();
            }
            let val = evaluate(model, data.test, &data.policy, data.stats)?;
            let record = EpochRecord {
                stage: si + 1,
                epoch,
                lr,
                train_loss: loss_sum / data.train.len() as f64,
                train_top1: correct as f64 / data.train.len() as f64,
                val_top1: val.top1,
                leaf_top1: val.per_leaf_top1,
            };
            observer.epoch_end(&record, model)?;
            records.push(record);
        }
        observer.stage_end(si + 1, model)?;
    }
    Ok(records)
}
