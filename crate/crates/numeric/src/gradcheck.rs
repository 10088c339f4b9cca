//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::norm::{BnState, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step used by the suites.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Largest accepted relative error in 64-bit mode.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(1, |a|, |n|)`, maximized over elements.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function at `x`.
pub fn numeric_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Compares the tape gradient of the scalar `f(x)` with central differences
/// and returns the maximum relative error.
pub fn finite_diff_gradcheck(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    step: f64,
) -> Result<f64> {
    check_inputs(std::slice::from_ref(x), step, |tape, vars| f(tape, vars[0]))
}

/// Gradient check of a scalar function of several inputs, each perturbed in
/// turn while the others stay fixed.
pub fn check_inputs(
    inputs: &[Tensor],
    step: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).expect("inputs require grad").clone();
        let numeric = numeric_gradient(input, step, |probe| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| t.constant(if j == k { probe.clone() } else { v.clone() }))
                .collect();
            let o = f(&mut t, &vs)?;
            Ok(t.value(o).item())
        })?;
        worst = worst.max(max_relative_error(analytic.data(), numeric.data()));
    }
    Ok(worst)
}

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output element carries a distinct upstream gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn case(
    reports: &mut Vec<GradcheckReport>,
    name: String,
    inputs: Vec<Tensor>,
    seed: u64,
    build: Build,
) -> Result<()> {
    let err = check_inputs(&inputs, GRADCHECK_STEP, |tape, vars| {
        let out = build(tape, vars)?;
        project(tape, out, seed)
    })?;
    reports.push(GradcheckReport {
        name,
        max_rel_error: err,
    });
    Ok(())
}

/// Runs the finite-difference check over every differentiable primitive on
/// three or more random shapes each.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = &mut rng;
    let shapes4: [[usize; 4]; 3] = [[1, 2, 3, 3], [2, 3, 4, 5], [3, 1, 2, 4]];
    let shapes2: [[usize; 2]; 3] = [[1, 4], [3, 5], [4, 2]];

    for (i, s) in shapes2.iter().enumerate() {
        let (a, b) = (uniform(r, s, -1.0, 1.0), uniform(r, s, -1.0, 1.0));
        case(&mut out, format!("add{s:?}"), vec![a.clone(), b.clone()], i as u64, Box::new(|t, v| t.add(v[0], v[1])))?;
        case(&mut out, format!("sub{s:?}"), vec![a.clone(), b.clone()], i as u64, Box::new(|t, v| t.sub(v[0], v[1])))?;
        case(&mut out, format!("mul{s:?}"), vec![a.clone(), b], i as u64, Box::new(|t, v| t.mul(v[0], v[1])))?;
        case(&mut out, format!("add_scalar{s:?}"), vec![a.clone()], i as u64, Box::new(|t, v| Ok(t.add_scalar(v[0], 0.7))))?;
        case(&mut out, format!("mul_scalar{s:?}"), vec![a.clone()], i as u64, Box::new(|t, v| Ok(t.mul_scalar(v[0], -1.3))))?;
        case(&mut out, format!("clamp{s:?}"), vec![a.clone()], i as u64, Box::new(|t, v| Ok(t.clamp(v[0], -0.5, 0.5))))?;
        case(&mut out, format!("relu{s:?}"), vec![a.clone()], i as u64, Box::new(|t, v| Ok(t.relu(v[0]))))?;
        case(&mut out, format!("sigmoid{s:?}"), vec![uniform(r, s, -4.0, 4.0)], i as u64, Box::new(|t, v| Ok(t.sigmoid(v[0]))))?;
        case(&mut out, format!("softmax{s:?}"), vec![uniform(r, s, -3.0, 3.0)], i as u64, Box::new(|t, v| t.softmax(v[0])))?;
        case(&mut out, format!("log{s:?}"), vec![uniform(r, s, 0.1, 2.0)], i as u64, Box::new(|t, v| Ok(t.log(v[0], crate::ops::EPS_LOG))))?;
        case(&mut out, format!("sum{s:?}"), vec![a.clone()], i as u64, Box::new(|t, v| Ok(t.sum(v[0]))))?;
        case(&mut out, format!("mean{s:?}"), vec![a.clone()], i as u64, Box::new(|t, v| Ok(t.mean(v[0]))))?;
        let flat = [s[0] * s[1]];
        case(&mut out, format!("reshape{s:?}"), vec![a.clone()], i as u64, Box::new(move |t, v| t.reshape(v[0], &flat)))?;
        let signed = Tensor::from_fn(s, |_| {
            let m = r.random_range(0.1..2.0);
            if r.random_bool(0.5) { m } else { -m }
        });
        case(&mut out, format!("signed_sqrt{s:?}"), vec![signed.clone()], i as u64, Box::new(|t, v| Ok(t.signed_sqrt(v[0]))))?;
        case(&mut out, format!("l2_normalize{s:?}"), vec![a.clone()], i as u64, Box::new(|t, v| t.l2_normalize_rows(v[0], crate::ops::EPS_NORM)))?;
        case(&mut out, format!("signed_sqrt_l2norm{s:?}"), vec![signed], i as u64, Box::new(|t, v| t.signed_sqrt_l2norm(v[0])))?;
        let k = s[1] + 2;
        let (w, b) = (uniform(r, &[s[1], k], -1.0, 1.0), uniform(r, &[k], -1.0, 1.0));
        case(&mut out, format!("fully_connected{s:?}"), vec![a.clone(), w, b], i as u64, Box::new(|t, v| t.fully_connected(v[0], v[1], Some(v[2]))))?;
        let (g, be) = (uniform(r, &[s[1]], 0.5, 1.5), uniform(r, &[s[1]], -0.5, 0.5));
        case(&mut out, format!("layer_norm{s:?}"), vec![a.clone(), g, be], i as u64, Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])))?;
        let idx: Vec<usize> = (0..s[0]).map(|n| n % s[1]).collect();
        case(&mut out, format!("pick{s:?}"), vec![a.clone()], i as u64, Box::new(move |t, v| t.pick(v[0], &idx)))?;
        let rows = uniform(r, &[s[0]], -1.0, 1.0);
        case(&mut out, format!("scale_rows{s:?}"), vec![a, rows], i as u64, Box::new(|t, v| t.scale_rows(v[0], v[1])))?;
    }

    for (i, s) in shapes4.iter().enumerate() {
        let seed = 100 + i as u64;
        let [n, c, h, w] = *s;
        let x = uniform(r, s, -1.0, 1.0);
        case(&mut out, format!("global_avg_pool{s:?}"), vec![x.clone()], seed, Box::new(|t, v| t.global_avg_pool(v[0])))?;
        case(&mut out, format!("global_max_pool{s:?}"), vec![x.clone()], seed, Box::new(|t, v| t.global_max_pool(v[0])))?;
        if h >= 2 && w >= 2 {
            case(&mut out, format!("max_pool2x2{s:?}"), vec![x.clone()], seed, Box::new(|t, v| t.max_pool2x2(v[0])))?;
        }
        let other = uniform(r, &[n, c + 1, h, w], -1.0, 1.0);
        case(&mut out, format!("concat_channels{s:?}"), vec![x.clone(), other], seed, Box::new(|t, v| t.concat_channels(v)))?;
        let a = uniform(r, &[n, c], -1.0, 1.0);
        case(&mut out, format!("scale_channels{s:?}"), vec![x.clone(), a.clone()], seed, Box::new(|t, v| t.scale_channels(v[0], v[1])))?;
        case(&mut out, format!("add_channels{s:?}"), vec![x.clone(), a], seed, Box::new(|t, v| t.add_channels(v[0], v[1])))?;
        let att = uniform(r, &[n, h * w], 0.0, 1.0);
        case(&mut out, format!("attention_pool{s:?}"), vec![x.clone(), att], seed, Box::new(|t, v| t.attention_pool(v[0], v[1])))?;
        let (g, be) = (uniform(r, &[c], 0.5, 1.5), uniform(r, &[c], -0.5, 0.5));
        case(&mut out, format!("batch_norm2d_train{s:?}"), vec![x.clone(), g.clone(), be.clone()], seed, Box::new(move |t, v| {
            let mut st = BnState::new(c);
            t.batch_norm2d(v[0], v[1], v[2], &mut st, Mode::Train)
        }))?;
        let mut eval_state = BnState::new(c);
        eval_state.running_mean = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
        eval_state.running_var = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
        eval_state.updates = 1;
        case(&mut out, format!("batch_norm2d_eval{s:?}"), vec![x, g, be], seed, Box::new(move |t, v| {
            let mut st = eval_state.clone();
            t.batch_norm2d(v[0], v[1], v[2], &mut st, Mode::Eval)
        }))?;
    }

    let conv_cases = [
        ([1, 2, 5, 5], ConvSpec::new(2, 3, 3, 1)),
        ([2, 2, 6, 5], ConvSpec::new(2, 2, 3, 2).with_dilation(2)),
        ([1, 3, 7, 7], ConvSpec::new(3, 2, 3, 3).with_dilation(3)),
        ([1, 1, 13, 13], ConvSpec::new(1, 2, 3, 6).with_dilation(6)),
        ([2, 3, 6, 6], ConvSpec::new(3, 4, 1, 0)),
        ([1, 2, 7, 6], ConvSpec::new(2, 2, 3, 1).with_stride(2)),
    ];
    for (i, (shape, spec)) in conv_cases.into_iter().enumerate() {
        let x = uniform(r, &shape, -1.0, 1.0);
        let w = uniform(r, &spec.weight_shape(), -1.0, 1.0);
        let b = uniform(r, &[spec.out_channels], -1.0, 1.0);
        case(
            &mut out,
            format!("conv2d{shape:?} d{}", spec.dilation),
            vec![x, w, b],
            200 + i as u64,
            Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), &spec)),
        )?;
    }
    Ok(out)
}
