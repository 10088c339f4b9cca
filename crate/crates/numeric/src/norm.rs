//! Batch and layer normalization.

use crate::error::{Result, TensorError};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{dims2, dims4, Tensor};

/// Variance floor used by both normalizations.
pub const BN_EPS: f64 = 1e-5;
/// Weight kept by the running statistics on each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Whether normalization layers use batch statistics and update state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of a batch normalization layer.
///
/// The first training step copies the batch statistics; later steps blend
/// them in with weight `1 - BN_MOMENTUM`.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Number of training batches folded into the statistics.
    pub updates: u64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    fn update(&mut self, mean: &[f64], var: &[f64]) {
        if self.updates == 0 {
            self.running_mean.copy_from_slice(mean);
            self.running_var.copy_from_slice(var);
        } else {
            let keep = BN_MOMENTUM;
            for (r, &m) in self.running_mean.iter_mut().zip(mean) {
                *r = keep * *r + (1.0 - keep) * m;
            }
            for (r, &v) in self.running_var.iter_mut().zip(var) {
                *r = keep * *r + (1.0 - keep) * v;
            }
        }
        self.updates += 1;
    }
}

impl Tape {
    /// Per-channel normalization of `[N, C, H, W]` followed by the affine map
    /// `gamma · x̂ + beta`.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<Var> {
        let [n, c, h, w] = dims4("batch_norm2d", self.value(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            return Err(TensorError::config(
                "batch_norm2d",
                format!("parameters or state do not have {c} channels"),
            ));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let xv = self.data(x);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let p = &xv[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                        mean[ch] += p.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for s in 0..n {
                    for ch in 0..c {
                        let p = &xv[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                        var[ch] += p.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var)
            }
            Mode::Eval => {
                if !state.is_initialized() {
                    return Err(TensorError::State(
                        "batch_norm2d in eval mode before any training step".into(),
                    ));
                }
                (state.running_mean.clone(), state.running_var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                for ((o, xh), &v) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&xv[r]) {
                    *xh = (v - mean[ch]) * inv_std[ch];
                    *o = gv[ch] * *xh + bv[ch];
                }
            }
        }
        if mode == Mode::Train {
            state.update(&mean, &var);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        ))
    }

    /// Normalizes each row of `[N, D]` over its `D` entries, then applies
    /// `gamma · x̂ + beta` with `gamma, beta: [D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [_, d] = dims2("layer_norm", self.value(x))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::config("layer_norm", format!("parameters must have shape [{d}]")));
        }
        let (gv, bv) = (self.data(gamma), self.data(beta));
        let xv = self.data(x);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / d);
        for ((row, xh), o) in xv.chunks(d).zip(xhat.chunks_mut(d)).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + BN_EPS).sqrt();
            for j in 0..d {
                xh[j] = (row[j] - mean) * is;
                o[j] = gv[j] * xh[j] + bv[j];
            }
            inv_std.push(is);
        }
        Ok(self.push(
            Tensor::from_parts(self.shape(x).to_vec(), out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }
}

pub(crate) fn batch_norm_backward(
    tape: &Tape,
    [x, gamma, beta]: [Var; 3],
    xhat: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    g: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let s = tape.shape(x);
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let gv = tape.data(gamma);
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for smp in 0..n {
        for ch in 0..c {
            let r = (smp * c + ch) * plane..(smp * c + ch + 1) * plane;
            for (gg, xh) in g[r.clone()].iter().zip(&xhat[r]) {
                dgamma[ch] += gg * xh;
                dbeta[ch] += gg;
            }
        }
    }
    let mut dx = vec![0.0; g.len()];
    let count = (n * plane) as f64;
    for smp in 0..n {
        for ch in 0..c {
            let r = (smp * c + ch) * plane..(smp * c + ch + 1) * plane;
            let scale = gv[ch] * inv_std[ch];
            for ((d, gg), xh) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                *d = if batch_stats {
                    scale * (gg - dbeta[ch] / count - xh * dgamma[ch] / count)
                } else {
                    scale * gg
                };
            }
        }
    }
    vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
}

pub(crate) fn layer_norm_backward(
    tape: &Tape,
    [x, gamma, beta]: [Var; 3],
    xhat: &[f64],
    inv_std: &[f64],
    g: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let d = *tape.shape(x).last().unwrap();
    let gv = tape.data(gamma);
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dx = vec![0.0; g.len()];
    for (((gr, xr), dr), &is) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).zip(inv_std) {
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..d {
            dgamma[j] += gr[j] * xr[j];
            dbeta[j] += gr[j];
            let dxh = gr[j] * gv[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xr[j];
        }
        for j in 0..d {
            let dxh = gr[j] * gv[j];
            dr[j] = is * (dxh - sum_dxh / d as f64 - xr[j] * sum_dxh_xh / d as f64);
        }
    }
    vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
}
