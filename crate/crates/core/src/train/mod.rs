//! Loss, optimizer, schedules and the staged training driver.

mod fit;
mod gradcheck;
mod loss;
mod plan;
mod sgd;

pub use acnet_numeric::init::xavier_init;
pub use gradcheck::{gradcheck_model, model_gradcheck};
pub use fit::{fit_two_stage, EpochRecord, JsonLines, TrainData, TrainObserver};
pub use loss::{nll, nll_tape, total_loss, total_loss_tape};
pub use plan::{lr_at, StageConfig, TrainPlan};
pub use sgd::{sgd_update, Sgd};
