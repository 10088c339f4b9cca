use acnet_numeric::{ParamKind, ParamStore};

/// `v ← m·v + (g + wd·w)`, `w ← w − lr·v` over aligned slices.
pub fn sgd_update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *w);
        *w -= lr * *v;
    }
}

/// Momentum SGD over a set of parameter stores. Biases and normalization
/// affine parameters are exempt from weight decay; frozen stores are skipped.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new() -> Self {
        Sgd::default()
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn step(&mut self, stores: &mut [&mut ParamStore], lr: f64, momentum: f64, weight_decay: f64) {
        if self.velocity.len() != stores.len() {
            self.velocity = stores
                .iter()
                .map(|s| s.params().iter().map(|p| vec![0.0; p.value.numel()]).collect())
                .collect();
        }
        for (store, vel) in stores.iter_mut().zip(&mut self.velocity) {
            if store.is_frozen() {
                continue;
            }
            for (p, v) in store.params_mut().iter_mut().zip(vel.iter_mut()) {
                let wd = if p.kind == ParamKind::Weight { weight_decay } else { 0.0 };
                let grad = p.grad.data().to_vec();
                sgd_update(p.value.data_mut(), &grad, v, lr, momentum, wd);
            }
        }
    }
}
