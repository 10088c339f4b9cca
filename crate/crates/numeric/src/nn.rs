//! Parameter storage and the layers built on top of the tape primitives.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::conv::ConvSpec;
use crate::error::{Result, TensorError};
use crate::init::xavier_uniform;
use crate::norm::{BnState, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(usize);

/// Role of a parameter; biases and normalization affines skip weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
}

#[derive(Clone, Debug)]
pub struct NamedBnState {
    pub name: String,
    pub state: BnState,
}

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

fn next_tag() -> u64 {
    NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed)
}

/// Named parameters and normalization statistics of one module tree.
///
/// Forward passes bind parameters onto a tape; after `Tape::backward`,
/// [`ParamStore::collect_grads`] adds the tape gradients into `Param::grad`.
/// A frozen store binds its parameters as constants. Every store (clones
/// included) carries a distinct tag so it only collects its own bindings.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    params: Vec<Param>,
    norms: Vec<NamedBnState>,
    frozen: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore {
            tag: next_tag(),
            params: Vec::new(),
            norms: Vec::new(),
            frozen: false,
        }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            tag: next_tag(),
            params: self.params.clone(),
            norms: self.norms.clone(),
            frozen: self.frozen,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_bn(&mut self, name: impl Into<String>, channels: usize) -> BnId {
        self.norms.push(NamedBnState {
            name: name.into(),
            state: BnState::new(channels),
        });
        BnId(self.norms.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[NamedBnState] {
        &self.norms
    }

    pub fn bn_states_mut(&mut self) -> &mut [NamedBnState] {
        &mut self.norms
    }

    pub fn bn_state_mut(&mut self, id: BnId) -> &mut BnState {
        &mut self.norms[id.0].state
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Places a parameter on the tape.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        let value = self.params[id.0].value.clone();
        if self.frozen {
            tape.constant(value)
        } else {
            let v = tape.variable(value);
            tape.record_binding(self.tag, id, v);
            v
        }
    }

    /// Adds the tape gradients of every parameter this store bound on `tape`.
    pub fn collect_grads(&mut self, tape: &Tape) -> Result<()> {
        for &(tag, id, v) in tape.bindings() {
            if tag != self.tag {
                continue;
            }
            let g = tape.grad(v).ok_or_else(|| {
                TensorError::State(format!("no gradient for {}; run backward first", self.params[id.0].name))
            })?;
            let p = &mut self.params[id.0];
            p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Convolution layer with xavier-initialized weights and zero bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: ConvSpec, bias: bool, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (kh, kw) = spec.kernel;
        let w = xavier_uniform(
            &spec.weight_shape(),
            spec.in_channels * kh * kw,
            spec.out_channels * kh * kw,
            rng,
        );
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Weight);
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]), ParamKind::Bias)
        });
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.weight);
        let b = self.bias.map(|b| store.bind(tape, b));
        tape.conv2d(x, w, b, &self.spec)
    }
}

/// Affine layer `[N, D] -> [N, K]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = xavier_uniform(&[inputs, outputs], inputs, outputs, rng);
        Linear {
            weight: store.add(format!("{name}.weight"), w, ParamKind::Weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), ParamKind::Bias),
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.weight);
        let b = store.bind(tape, self.bias);
        tape.fully_connected(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::Norm),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Norm),
            state: store.add_bn(name, channels),
        }
    }

    pub fn forward(&self, store: &mut ParamStore, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let g = store.bind(tape, self.gamma);
        let b = store.bind(tape, self.beta);
        tape.batch_norm2d(x, g, b, store.bn_state_mut(self.state), mode)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[width]), ParamKind::Norm),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]), ParamKind::Norm),
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = store.bind(tape, self.gamma);
        let b = store.bind(tape, self.beta);
        tape.layer_norm(x, g, b)
    }
}
