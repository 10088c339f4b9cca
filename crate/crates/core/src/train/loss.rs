use acnet_numeric::ops::{floor_keep_nan, EPS_LOG};
use acnet_numeric::{Tape, Tensor, Var};

use crate::error::{AcnetError, Result};
use crate::tree::{Prediction, TreeTrace};

/// Tolerance on probability rows not summing to 1.
const ROW_TOLERANCE: f64 = 1e-6;

fn check_labels(n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(AcnetError::Input(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(AcnetError::Input(format!("label {y} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean over the batch of `−log(max(dist[n, y_n], ε))`.
pub fn nll(dist: &Tensor, labels: &[usize]) -> Result<f64> {
    let &[n, k] = dist.shape() else {
        return Err(AcnetError::Input(format!("distribution must be [N, K], got {:?}", dist.shape())));
    };
    check_labels(n, k, labels)?;
    for r in 0..n {
        let s: f64 = dist.row(r).iter().sum();
        if (s - 1.0).abs() > ROW_TOLERANCE {
            return Err(AcnetError::Input(format!("row {r} sums to {s}")));
        }
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -floor_keep_nan(dist.row(r)[y], EPS_LOG).ln())
        .sum();
    Ok(total / n as f64)
}

/// [`nll`] recorded on a tape.
pub fn nll_tape(tape: &mut Tape, dist: Var, labels: &[usize]) -> Result<Var> {
    let &[n, k] = tape.shape(dist) else {
        return Err(AcnetError::Input(format!("distribution must be [N, K], got {:?}", tape.shape(dist))));
    };
    check_labels(n, k, labels)?;
    let p = tape.pick(dist, labels)?;
    let logp = tape.log(p, EPS_LOG);
    let mean = tape.mean(logp);
    Ok(tape.mul_scalar(mean, -1.0))
}

/// `nll(C) + Σ_leaves nll(P_i)`.
pub fn total_loss(pred: &Prediction, labels: &[usize]) -> Result<f64> {
    let mut total = nll(&pred.combined, labels)?;
    for p in &pred.leaf_probs {
        total += nll(p, labels)?;
    }
    Ok(total)
}

/// [`total_loss`] recorded on a tape.
pub fn total_loss_tape(tape: &mut Tape, trace: &TreeTrace, labels: &[usize]) -> Result<Var> {
    let mut total = nll_tape(tape, trace.combined, labels)?;
    for &p in &trace.leaf_probs {
        let l = nll_tape(tape, p, labels)?;
        total = tape.add(total, l)?;
    }
    Ok(total)
}
