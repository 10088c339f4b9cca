//! Finite-difference check of the full model: loss gradients with respect to
//! the input images and every parameter tensor.

use acnet_numeric::gradcheck::{max_relative_error, GradcheckReport, GRADCHECK_STEP};
use acnet_numeric::{Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::total_loss_tape;
use crate::backbone::{build_desk_backbone, BlockSpec, DeskBackboneSpec};
use crate::error::Result;
use crate::tree::{build_tree, EdgeMode, Pooling, TreeConfig, TreeModel};

/// Height-2 model small enough for exhaustive central differences:
/// 3×8×8 input, one downsampling block of width 4, 4×4×4 features, 3 classes.
pub fn gradcheck_model(seed: u64) -> Result<TreeModel> {
    let spec = DeskBackboneSpec {
        input_channels: 3,
        side: 8,
        blocks: vec![BlockSpec { width: 4, downsample: true }],
    };
    let config = TreeConfig {
        height: 2,
        channels: vec![4, 4],
        dilations: vec![1, 2],
        edge_mode: EdgeMode::Asymmetric,
        routing_pool: Pooling::Gap,
        gc_block: true,
        attention: true,
        aspp: true,
        num_classes: 3,
    };
    build_tree(&config, build_desk_backbone(&spec, seed)?, seed + 1)
}

fn loss_value(model: &mut TreeModel, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let trace = model.forward_tape(&mut tape, x, Mode::Train)?;
    let loss = total_loss_tape(&mut tape, &trace, labels)?;
    Ok(tape.value(loss).item())
}

/// Central differences of `f` at `x`.
fn numeric_gradient(x: &Tensor, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + GRADCHECK_STEP;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - GRADCHECK_STEP;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * GRADCHECK_STEP);
    }
    Ok(grad)
}

/// Checks `∂loss/∂input` and `∂loss/∂θ` for every parameter tensor of
/// [`gradcheck_model`] on a random batch of two in training mode. One report
/// per tensor, the input first.
pub fn model_gradcheck(seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut model = gradcheck_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let images = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
    let labels = [0, 2];

    let mut tape = Tape::new();
    let x = tape.variable(images.clone());
    let trace = model.forward_tape(&mut tape, x, Mode::Train)?;
    let loss = total_loss_tape(&mut tape, &trace, &labels)?;
    tape.backward(loss)?;
    model.zero_grads();
    model.collect_grads(&tape)?;
    let input_grad = tape.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(images.shape()));

    let mut reports = Vec::new();
    let numeric = numeric_gradient(&images, |probe| loss_value(&mut model, probe, &labels))?;
    reports.push(GradcheckReport {
        name: "model/input".into(),
        max_rel_error: max_relative_error(input_grad.data(), numeric.data()),
    });

    for s in 0..2 {
        let count = model.stores()[s].params().len();
        for p in 0..count {
            let (name, value, analytic) = {
                let param = &model.stores()[s].params()[p];
                (param.name.clone(), param.value.clone(), param.grad.clone())
            };
            let numeric = numeric_gradient(&value, |probe| {
                model.stores_mut()[s].params_mut()[p].value = probe.clone();
                loss_value(&mut model, &images, &labels)
            })?;
            model.stores_mut()[s].params_mut()[p].value = value;
            reports.push(GradcheckReport {
                name: format!("model/{name}"),
                max_rel_error: max_relative_error(analytic.data(), numeric.data()),
            });
        }
    }
    Ok(reports)
}
