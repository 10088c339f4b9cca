//! Operation tape for reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node holding its output value
//! and whatever it needs for the backward pass. [`Tape::backward`] replays
//! the nodes in reverse order exactly once; the tape must be [`reset`]
//! before it can be reused.
//!
//! [`reset`]: Tape::reset

use crate::conv::ConvGeometry;
use crate::error::{Result, TensorError};
use crate::nn::ParamId;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Log { x: Var, floor: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, cols: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GlobalAvgPool(Var),
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    MaxPool2x2 { x: Var, argmax: Vec<usize> },
    SignedSqrt(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    ConcatChannels(Vec<Var>),
    ScaleChannels { x: Var, a: Var },
    AddChannels { x: Var, v: Var },
    AttentionPool { x: Var, a: Var },
    Pick { x: Var, index: Vec<usize> },
    ScaleRows { x: Var, r: Var },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Log { .. } => "log",
            Op::Clamp { .. } => "clamp",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Linear { .. } => "fully_connected",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::MaxPool2x2 { .. } => "max_pool2x2",
            Op::SignedSqrt(..) => "signed_sqrt",
            Op::L2NormalizeRows { .. } => "l2_normalize",
            Op::ConcatChannels(..) => "concat_channels",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::AddChannels { .. } => "add_channels",
            Op::AttentionPool { .. } => "attention_pool",
            Op::Pick { .. } => "pick",
            Op::ScaleRows { .. } => "scale_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::GlobalAvgPool(x)
            | Op::SignedSqrt(x) => vec![*x],
            Op::Log { x, .. }
            | Op::Clamp { x, .. }
            | Op::GlobalMaxPool { x, .. }
            | Op::MaxPool2x2 { x, .. }
            | Op::L2NormalizeRows { x, .. }
            | Op::Pick { x, .. } => vec![*x],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::ConcatChannels(xs) => xs.clone(),
            Op::ScaleChannels { x, a } | Op::AttentionPool { x, a } => vec![*x, *a],
            Op::AddChannels { x, v } => vec![*x, *v],
            Op::ScaleRows { x, r } => vec![*x, *r],
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Ordered record of executed operations.
///
/// A tape and the values on it form one single-threaded computation
/// context.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    bindings: Vec<(u64, ParamId, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can record a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bindings.clear();
        self.backward_done = false;
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Input that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records that `v` carries parameter `id` of the store tagged `store`.
    pub(crate) fn record_binding(&mut self, store: u64, id: ParamId, v: Var) {
        self.bindings.push((store, id, v));
    }

    pub(crate) fn bindings(&self) -> &[(u64, ParamId, Var)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; present iff the node requires one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First node whose value holds a NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.all_finite())
            .map(|i| (Var(i), self.nodes[i].op.name()))
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Propagates gradients from a scalar `loss` to every node that requires
    /// one. Allowed once per recorded pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::State(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::config(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                for (input, contrib) in self.input_grads(node, &g) {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                let shape = node.value.shape().to_vec();
                node.grad = Some(match g {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                });
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn input_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::MulScalar(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
            Op::Log { x, floor } => {
                let xv = self.data(*x);
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > *floor { g / x } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.data(*x);
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                vec![(*x, g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::Sigmoid(x) => {
                vec![(*x, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect())]
            }
            Op::Softmax(x) => {
                let k = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(k).zip(out.chunks(k)).zip(d.chunks_mut(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = y * (g - dot);
                    }
                }
                vec![(*x, d)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Linear { x, w, b } => crate::ops::linear_backward(self, *x, *w, *b, g),
            Op::Conv2d { x, w, b, geom, cols } => {
                crate::conv::conv2d_backward(self, *x, *w, *b, geom, cols, g)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => crate::norm::batch_norm_backward(
                self,
                [*x, *gamma, *beta],
                xhat,
                inv_std,
                *batch_stats,
                g,
            ),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => crate::norm::layer_norm_backward(self, [*x, *gamma, *beta], xhat, inv_std, g),
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let d = g
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / plane as f64, plane))
                    .collect();
                vec![(*x, d)]
            }
            Op::GlobalMaxPool { x, argmax } | Op::MaxPool2x2 { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (&i, &g) in argmax.iter().zip(g) {
                    d[i] += g;
                }
                vec![(*x, d)]
            }
            Op::SignedSqrt(x) => {
                let d = g
                    .iter()
                    .zip(out)
                    .map(|(g, y)| g / (2.0 * y.abs().max(crate::ops::SQRT_GRAD_FLOOR.sqrt())))
                    .collect();
                vec![(*x, d)]
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let k = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; g.len()];
                for (((gr, yr), dr), &norm) in
                    g.chunks(k).zip(out.chunks(k)).zip(d.chunks_mut(k)).zip(norms)
                {
                    if norm > *eps {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = (g - y * dot) / norm;
                        }
                    } else {
                        for (d, g) in dr.iter_mut().zip(gr) {
                            *d = g / eps;
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::ConcatChannels(xs) => crate::ops::concat_backward(self, xs, g),
            Op::ScaleChannels { x, a } => crate::ops::scale_channels_backward(self, *x, *a, g),
            Op::AddChannels { x, v } => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let dv = g.chunks(plane).map(|c| c.iter().sum()).collect();
                vec![(*x, g.to_vec()), (*v, dv)]
            }
            Op::AttentionPool { x, a } => crate::ops::attention_pool_backward(self, *x, *a, g),
            Op::Pick { x, index } => {
                let k = self.shape(*x)[1];
                let mut d = vec![0.0; self.value(*x).numel()];
                for (n, (&i, &g)) in index.iter().zip(g).enumerate() {
                    d[n * k + i] = g;
                }
                vec![(*x, d)]
            }
            Op::ScaleRows { x, r } => {
                let k = self.shape(*x)[1];
                let (xv, rv) = (self.data(*x), self.data(*r));
                let mut dx = vec![0.0; g.len()];
                let mut dr = vec![0.0; rv.len()];
                for n in 0..rv.len() {
                    for j in 0..k {
                        dx[n * k + j] = g[n * k + j] * rv[n];
                        dr[n] += g[n * k + j] * xv[n * k + j];
                    }
                }
                vec![(*x, dx), (*r, dr)]
            }
        }
    }
}
