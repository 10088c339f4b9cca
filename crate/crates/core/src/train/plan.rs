use serde::{Deserialize, Serialize};

use crate::error::{AcnetError, Result};

/// One training stage with a step learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub freeze_backbone: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_divisor: f64,
    /// Epochs (1-based) from which the rate is divided once more.
    pub milestones: Vec<usize>,
    pub weight_decay: f64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(AcnetError::Config(msg));
        if self.epochs == 0 {
            return fail("a stage needs at least one epoch".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return fail(format!("learning rate {} must be finite and non-negative", self.initial_lr));
        }
        if !(self.lr_divisor > 1.0 && self.lr_divisor.is_finite()) {
            return fail(format!("learning-rate divisor {} must exceed 1", self.lr_divisor));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return fail(format!("milestones {:?} must precede epoch {}", self.milestones, self.epochs));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay {} must be finite and non-negative", self.weight_decay));
        }
        Ok(())
    }

    /// `initial_lr / divisor^(milestones ≤ epoch)`; epochs are 1-based.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.initial_lr / self.lr_divisor.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stages: Vec<StageConfig>,
    pub momentum: f64,
    pub seed: u64,
}

/// Free-function form of [`StageConfig::lr_at`].
pub fn lr_at(stage: &StageConfig, epoch: usize) -> f64 {
    stage.lr_at(epoch)
}

impl TrainPlan {
    /// Frozen-backbone stage of 60 epochs, then 200 epochs of fine-tuning.
    pub fn full(seed: u64) -> Self {
        TrainPlan {
            stages: vec![
                StageConfig {
                    freeze_backbone: true,
                    epochs: 60,
                    batch_size: 24,
                    initial_lr: 1.0,
                    lr_divisor: 4.0,
                    milestones: vec![10, 20, 30, 40],
                    weight_decay: 5e-6,
                },
                StageConfig {
                    freeze_backbone: false,
                    epochs: 200,
                    batch_size: 16,
                    initial_lr: 0.001,
                    lr_divisor: 10.0,
                    milestones: vec![30, 40, 50],
                    weight_decay: 5e-4,
                },
            ],
            momentum: 0.9,
            seed,
        }
    }

    /// Desk-scale schedule: 5 frozen epochs, then 30 epochs of fine-tuning.
    pub fn desk(seed: u64) -> Self {
        TrainPlan {
            stages: vec![
                StageConfig {
                    freeze_backbone: true,
                    epochs: 5,
                    batch_size: 16,
                    initial_lr: 0.1,
                    lr_divisor: 4.0,
                    milestones: vec![],
                    weight_decay: 5e-6,
                },
                StageConfig {
                    freeze_backbone: false,
                    epochs: 30,
                    batch_size: 16,
                    initial_lr: 0.01,
                    lr_divisor: 10.0,
                    milestones: vec![15, 25],
                    weight_decay: 5e-4,
                },
            ],
            momentum: 0.9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(AcnetError::Config("a plan needs at least one stage".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AcnetError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        self.stages.iter().try_for_each(StageConfig::validate)
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        TrainPlan::full(0).validate().unwrap();
        TrainPlan::desk(0).validate().unwrap();
        assert_eq!(TrainPlan::desk(0).total_epochs(), 35);
    }

    #[test]
    fn schedule_steps_at_milestones() {
        let s = &TrainPlan::full(0).stages[0];
        assert_eq!(s.lr_at(1), 1.0);
        assert_eq!(s.lr_at(9), 1.0);
        assert_eq!(s.lr_at(10), 0.25);
        let mut last = f64::INFINITY;
        for e in 1..=s.epochs {
            assert!(s.lr_at(e) <= last);
            last = s.lr_at(e);
        }
    }

    #[test]
    fn invalid_stages_are_rejected() {
        let mut s = TrainPlan::desk(0).stages[1].clone();
        s.milestones = vec![25, 15];
        assert!(s.validate().is_err());
        s.milestones = vec![30];
        assert!(s.validate().is_err());
        s.milestones = vec![];
        s.lr_divisor = 1.0;
        assert!(s.validate().is_err());
    }
}
