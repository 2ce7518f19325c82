use crate::model::Vae;
use crate::real::Real;

/// Stochastic gradient descent with optional heavy-ball momentum and L2
/// weight decay: `v ← μ v + (g + wd θ)`, `θ ← θ − lr v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay }
    }

    /// Applies one update. `velocity` is created lazily when momentum is on
    /// and left untouched otherwise.
    pub fn step<F: Real>(&self, params: &mut Vae<F>, grads: &Vae<F>, velocity: &mut Option<Vae<F>>, lr: f64) {
        let lr = F::of(lr);
        let wd = F::of(self.weight_decay);
        if self.momentum == 0.0 {
            for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                for (p, &g) in p.data.iter_mut().zip(g.data) {
                    *p -= lr * (g + wd * *p);
                }
            }
            return;
        }
        let mu = F::of(self.momentum);
        let v = velocity.get_or_insert_with(|| params.zeros_like());
        for ((p, g), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(v.tensors_mut())
        {
            for ((p, &g), v) in p.data.iter_mut().zip(g.data).zip(v.data.iter_mut()) {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
    }
}
