//! Elementwise, reduction, activation and tensor-plumbing operations.

use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{dims2, dims4, Tensor};

/// Floor applied inside `signed_sqrt_l2norm` to the row norm.
pub const EPS_NORM: f64 = 1e-12;
/// Floor applied to probabilities before taking their logarithm.
pub const EPS_LOG: f64 = 1e-12;
/// Below this magnitude the signed square root's derivative is held at its
/// value at the threshold, bounding gradients for near-zero inputs.
pub const SQRT_GRAD_FLOOR: f64 = 1e-2;

/// `max(v, floor)` that lets NaN through so non-finite values stay visible.
pub fn floor_keep_nan(v: f64, floor: f64) -> f64 {
    if v < floor {
        floor
    } else {
        v
    }
}

/// Max-pool comparison: larger wins, and NaN beats everything.
fn beats(a: f64, b: f64) -> bool {
    a > b || (a.is_nan() && !b.is_nan())
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::config(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape(x).to_vec(), self.data(x).iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.map(x, |v| v + c);
        self.push(v, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.map(x, |v| v * c);
        self.push(v, Op::MulScalar(x, c))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.mul_scalar(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// `ln(max(x, floor))`; the gradient vanishes where the floor is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let v = self.map(x, |v| floor_keep_nan(v, floor).ln());
        self.push(v, Op::Log { x, floor })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.map(x, |v| v.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| floor_keep_nan(v, 0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    /// Row-wise softmax over the last axis of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let [_, k] = dims2("softmax", self.value(x))?;
        let mut out = self.data(x).to_vec();
        out.chunks_mut(k).for_each(softmax_in_place);
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(v, Op::Softmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// `x · w + b` for `x: [N, D]`, `w: [D, K]`, `b: [K]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, d] = dims2("fully_connected", self.value(x))?;
        let [dw, k] = dims2("fully_connected", self.value(w))?;
        if d != dw {
            return Err(TensorError::config(
                "fully_connected",
                format!("input width {d} vs weight rows {dw}"),
            ));
        }
        let mut out = vec![0.0; n * k];
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(TensorError::config(
                    "fully_connected",
                    format!("bias shape {:?}, expected [{k}]", self.shape(b)),
                ));
            }
            for row in out.chunks_mut(k) {
                row.copy_from_slice(self.data(b));
            }
        }
        gemm(n, d, k, self.data(x), false, self.data(w), false, 1.0, &mut out);
        Ok(self.push(Tensor::from_parts(vec![n, k], out), Op::Linear { x, w, b }))
    }

    /// Per-channel spatial mean: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("global_avg_pool", self.value(x))?;
        let plane = h * w;
        let out = self
            .data(x)
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool(x)))
    }

    /// Per-channel spatial maximum: `[N, C, H, W] -> [N, C]`. The gradient
    /// flows to the first maximal position in row-major order.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("global_max_pool", self.value(x))?;
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (i, p) in self.data(x).chunks(plane).enumerate() {
            let j = (1..p.len()).fold(0, |best, i| if beats(p[i], p[best]) { i } else { best });
            out.push(p[j]);
            argmax.push(i * plane + j);
        }
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalMaxPool { x, argmax }))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("max_pool2x2", self.value(x))?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(TensorError::config(
                "max_pool2x2",
                format!("{h}x{w} map is too small to downsample"),
            ));
        }
        let xv = self.data(x);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if beats(xv[i], xv[best]) {
                            best = i;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, ho, wo], out),
            Op::MaxPool2x2 { x, argmax },
        ))
    }

    /// `sign(x)·sqrt(|x|)` elementwise.
    pub fn signed_sqrt(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| if v == 0.0 { 0.0 } else { v.signum() * v.abs().sqrt() });
        self.push(v, Op::SignedSqrt(x))
    }

    /// Divides each row of `[N, D]` by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let [_, d] = dims2("l2_normalize", self.value(x))?;
        let mut out = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(norm);
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(v, Op::L2NormalizeRows { x, norms, eps }))
    }

    /// Signed square root followed by row-wise L2 normalization.
    pub fn signed_sqrt_l2norm(&mut self, x: Var) -> Result<Var> {
        let s = self.signed_sqrt(x);
        self.l2_normalize_rows(s, EPS_NORM)
    }

    /// Concatenates `[N, Ci, H, W]` tensors along the channel axis, in order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::config("concat_channels", "empty input list"))?;
        let [n, _, h, w] = dims4("concat_channels", self.value(first))?;
        let mut total = 0;
        for &x in xs {
            let [xn, xc, xh, xw] = dims4("concat_channels", self.value(x))?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(TensorError::config(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(x), self.shape(first)),
                ));
            }
            total += xc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for &x in xs {
                let c = self.shape(x)[1];
                out.extend_from_slice(&self.data(x)[s * c * plane..(s + 1) * c * plane]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, total, h, w], out),
            Op::ConcatChannels(xs.to_vec()),
        ))
    }

    /// `out[n,c,h,w] = x[n,c,h,w] · a[n,c]`.
    pub fn scale_channels(&mut self, x: Var, a: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("scale_channels", self.value(x))?;
        if self.shape(a) != [n, c] {
            return Err(TensorError::config(
                "scale_channels",
                format!("scale shape {:?}, expected [{n}, {c}]", self.shape(a)),
            ));
        }
        let plane = h * w;
        let av = self.data(a);
        let out = self
            .data(x)
            .chunks(plane)
            .zip(av)
            .flat_map(|(p, &s)| p.iter().map(move |v| v * s))
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, c, h, w], out), Op::ScaleChannels { x, a }))
    }

    /// `out[n,c,h,w] = x[n,c,h,w] + v[n,c]`.
    pub fn add_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("add_channels", self.value(x))?;
        if self.shape(v) != [n, c] {
            return Err(TensorError::config(
                "add_channels",
                format!("offset shape {:?}, expected [{n}, {c}]", self.shape(v)),
            ));
        }
        let plane = h * w;
        let out = self
            .data(x)
            .chunks(plane)
            .zip(self.data(v))
            .flat_map(|(p, &s)| p.iter().map(move |x| x + s))
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, c, h, w], out), Op::AddChannels { x, v }))
    }

    /// Spatially weighted channel sum `out[n,c] = Σ_p x[n,c,p] · a[n,p]`
    /// with `a` holding `N·H·W` weights.
    pub fn attention_pool(&mut self, x: Var, a: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("attention_pool", self.value(x))?;
        let plane = h * w;
        if self.value(a).numel() != n * plane || self.shape(a)[0] != n {
            return Err(TensorError::config(
                "attention_pool",
                format!("weights {:?} for features {:?}", self.shape(a), self.shape(x)),
            ));
        }
        let mut out = vec![0.0; n * c];
        gemm_batched_rows(n, c, plane, self.data(x), self.data(a), &mut out);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::AttentionPool { x, a }))
    }

    /// Selects `x[n, index[n]]` from `[N, K]`, giving `[N]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let [n, k] = dims2("pick", self.value(x))?;
        if index.len() != n || index.iter().any(|&i| i >= k) {
            return Err(TensorError::config(
                "pick",
                format!("{} indices into [{n}, {k}]", index.len()),
            ));
        }
        let out = index.iter().enumerate().map(|(r, &i)| self.data(x)[r * k + i]).collect();
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            Op::Pick {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// `out[n,k] = x[n,k] · r[n]`.
    pub fn scale_rows(&mut self, x: Var, r: Var) -> Result<Var> {
        let [n, k] = dims2("scale_rows", self.value(x))?;
        if self.shape(r) != [n] {
            return Err(TensorError::config(
                "scale_rows",
                format!("row weights {:?}, expected [{n}]", self.shape(r)),
            ));
        }
        let out = self
            .data(x)
            .chunks(k)
            .zip(self.data(r))
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, k], out), Op::ScaleRows { x, r }))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// For each sample, `out[n] (c) = x[n] (c×p) · a[n] (p)`.
fn gemm_batched_rows(n: usize, c: usize, p: usize, x: &[f64], a: &[f64], out: &mut [f64]) {
    for s in 0..n {
        gemm(
            c,
            p,
            1,
            &x[s * c * p..(s + 1) * c * p],
            false,
            &a[s * p..(s + 1) * p],
            false,
            0.0,
            &mut out[s * c..(s + 1) * c],
        );
    }
}

pub(crate) fn linear_backward(
    tape: &Tape,
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let [n, d] = [tape.shape(x)[0], tape.shape(x)[1]];
    let k = tape.shape(w)[1];
    let mut dx = vec![0.0; n * d];
    gemm(n, k, d, g, false, tape.data(w), true, 0.0, &mut dx);
    let mut dw = vec![0.0; d * k];
    gemm(d, n, k, tape.data(x), true, g, false, 0.0, &mut dw);
    let mut grads = vec![(x, dx), (w, dw)];
    if let Some(b) = b {
        let mut db = vec![0.0; k];
        for row in g.chunks(k) {
            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
        }
        grads.push((b, db));
    }
    grads
}

pub(crate) fn concat_backward(tape: &Tape, xs: &[Var], g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let s = tape.shape(xs[0]);
    let (n, plane) = (s[0], s[2] * s[3]);
    let total: usize = xs.iter().map(|&x| tape.shape(x)[1]).sum();
    let mut grads: Vec<(Var, Vec<f64>)> = xs
        .iter()
        .map(|&x| (x, Vec::with_capacity(tape.value(x).numel())))
        .collect();
    for sample in 0..n {
        let mut offset = sample * total * plane;
        for (x, d) in grads.iter_mut() {
            let len = tape.shape(*x)[1] * plane;
            d.extend_from_slice(&g[offset..offset + len]);
            offset += len;
        }
    }
    grads
}

pub(crate) fn scale_channels_backward(tape: &Tape, x: Var, a: Var, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let s = tape.shape(x);
    let plane = s[2] * s[3];
    let (xv, av) = (tape.data(x), tape.data(a));
    let mut dx = vec![0.0; g.len()];
    let mut da = vec![0.0; av.len()];
    for (i, &scale) in av.iter().enumerate() {
        let r = i * plane..(i + 1) * plane;
        for ((d, gg), xx) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xv[r]) {
            *d = gg * scale;
            da[i] += gg * xx;
        }
    }
    vec![(x, dx), (a, da)]
}

pub(crate) fn attention_pool_backward(tape: &Tape, x: Var, a: Var, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let s = tape.shape(x);
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let (xv, av) = (tape.data(x), tape.data(a));
    let mut dx = vec![0.0; xv.len()];
    let mut da = vec![0.0; av.len()];
    for smp in 0..n {
        let gs = &g[smp * c..(smp + 1) * c];
        let asl = &av[smp * plane..(smp + 1) * plane];
        // dx[c, p] = g[c] a[p]
        gemm(c, 1, plane, gs, false, asl, false, 0.0, &mut dx[smp * c * plane..(smp + 1) * c * plane]);
        // da[p] = Σ_c g[c] x[c, p]
        gemm(1, c, plane, gs, false, &xv[smp * c * plane..(smp + 1) * c * plane], false, 0.0, &mut da[smp * plane..(smp + 1) * plane]);
    }
    vec![(x, dx), (a, da)]
}
