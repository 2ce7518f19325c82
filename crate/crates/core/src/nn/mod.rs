//! Minimal feed-forward layers with explicit backward passes.
//!
//! Activations are row-major `N × features` matrices; convolutional layers
//! interpret each row as a flattened `C × H × W` image. Gradients are
//! accumulated into a parameter container of the same type as the model,
//! which keeps optimizers and checkpointing oblivious to layer structure.

mod conv;
mod dense;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

pub use conv::{Conv2d, ConvGeometry, Upsample2x};
pub use dense::Dense;

use crate::real::Real;

/// Named view of one parameter tensor.
pub struct TensorRef<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

pub struct TensorMut<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [F],
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<F> {
    Dense(Dense<F>),
    Conv(Conv2d<F>),
    Upsample(Upsample2x),
    Relu,
}

impl<F: Real> Layer<F> {
    fn zeros_like(&self) -> Self {
        match self {
            Layer::Dense(d) => Layer::Dense(d.zeros_like()),
            Layer::Conv(c) => Layer::Conv(c.zeros_like()),
            Layer::Upsample(u) => Layer::Upsample(*u),
            Layer::Relu => Layer::Relu,
        }
    }
}

/// Values cached by a training-mode forward pass.
pub struct Tape<F> {
    inputs: Vec<Array2<F>>,
    cols: Vec<Option<Array2<F>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<F> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Real> Sequential<F> {
    pub fn new(layers: Vec<Layer<F>>) -> Self {
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => d.forward(h.view()),
                Layer::Conv(c) => c.forward(h.view()).0,
                Layer::Upsample(u) => u.forward(h.view()),
                Layer::Relu => h.mapv_into(relu),
            };
        }
        h
    }

    pub fn forward_tape(&self, x: ArrayView2<'_, F>) -> (Array2<F>, Tape<F>) {
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            cols: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_owned();
        for layer in &self.layers {
            let (out, cols) = match layer {
                Layer::Dense(d) => (d.forward(h.view()), None),
                Layer::Conv(c) => {
                    let (out, cols) = c.forward(h.view());
                    (out, Some(cols))
                }
                Layer::Upsample(u) => (u.forward(h.view()), None),
                Layer::Relu => (h.mapv(relu), None),
            };
            tape.inputs.push(h);
            tape.cols.push(cols);
            h = out;
        }
        (h, tape)
    }

    /// Propagates `grad` from the output back to the input, accumulating
    /// parameter gradients into `grads` (a container shaped like `self`).
    pub fn backward(&self, tape: &Tape<F>, grad: Array2<F>, grads: &mut Self) -> Array2<F> {
        let mut g = grad;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.inputs[idx];
            g = match (layer, &mut grads.layers[idx]) {
                (Layer::Dense(d), Layer::Dense(gd)) => d.backward(input.view(), g.view(), gd),
                (Layer::Conv(c), Layer::Conv(gc)) => {
                    let cols = tape.cols[idx].as_ref().expect("conv tape stores im2col");
                    c.backward(cols.view(), g.view(), gc)
                }
                (Layer::Upsample(u), _) => u.backward(g.view()),
                (Layer::Relu, _) => {
                    ndarray::Zip::from(&mut g).and(input).for_each(|gv, &x| {
                        if x <= F::zero() {
                            *gv = F::zero();
                        }
                    });
                    g
                }
                _ => unreachable!("gradient container does not mirror the model"),
            };
        }
        g
    }

    pub fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_, F>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => out.extend(d.tensors(&format!("{prefix}.{i}"))),
                Layer::Conv(c) => out.extend(c.tensors(&format!("{prefix}.{i}"))),
                _ => {}
            }
        }
        out
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_, F>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Dense(d) => out.extend(d.tensors_mut(&format!("{prefix}.{i}"))),
                Layer::Conv(c) => out.extend(c.tensors_mut(&format!("{prefix}.{i}"))),
                _ => {}
            }
        }
        out
    }

    pub fn output_width(&self, input_width: usize) -> usize {
        self.layers.iter().fold(input_width, |w, layer| match layer {
            Layer::Dense(d) => d.out_features(),
            Layer::Conv(c) => c.geometry().out_len(),
            Layer::Upsample(u) => u.out_len(),
            Layer::Relu => w,
        })
    }
}

#[inline]
fn relu<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

/// Gaussian initialization with standard deviation `sqrt(gain / fan_in)`.
pub(crate) fn init_normal<F: Real>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Array2<F> {
    use rand_distr::{Distribution, StandardNormal};
    let std = (gain / fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        F::of(v * std)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_stack(rng: &mut ChaCha8Rng) -> Sequential<f64> {
        let geom = ConvGeometry::new(1, 4, 4, 2, 3, 2, 1);
        let conv = Conv2d::init(geom, rng);
        let up = Upsample2x::new(2, 2, 2);
        let conv2 = Conv2d::init(ConvGeometry::new(2, 4, 4, 1, 3, 1, 1), rng);
        let mut net = Sequential::new(vec![
            Layer::Conv(conv),
            Layer::Relu,
            Layer::Upsample(up),
            Layer::Conv(conv2),
            Layer::Relu,
            Layer::Dense(Dense::init(16, 3, 1.0, rng)),
        ]);
        // Nonzero biases keep pre-activations off the ReLU kink.
        for t in net.tensors_mut("n") {
            if t.name.ends_with("bias") {
                for (i, b) in t.data.iter_mut().enumerate() {
                    *b = 0.1 + 0.05 * i as f64;
                }
            }
        }
        net
    }

    /// Loss = Σ out ⊙ weights; checked against central differences.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = tiny_stack(&mut rng);
        let x = Array2::from_shape_fn((2, 16), |(i, j)| ((i * 16 + j) as f64 * 0.37).sin());
        let w = Array2::from_shape_fn((2, 3), |(i, j)| 1.0 + i as f64 - 0.5 * j as f64);
        let loss = |net: &Sequential<f64>, x: &Array2<f64>| (net.forward(x.view()) * &w).sum();

        let (out, tape) = net.forward_tape(x.view());
        assert_eq!(out, net.forward(x.view()));
        let mut grads = net.zeros_like();
        let gx = net.backward(&tape, w.clone(), &mut grads);

        let h = 1e-6;
        for idx in [(0, 0), (1, 5), (0, 15)] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += h;
            xm[idx] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6, "input grad {fd} vs {}", gx[idx]);
        }

        let analytic: Vec<Vec<f64>> = grads.tensors("n").iter().map(|t| t.data.to_vec()).collect();
        let n_tensors = analytic.len();
        for t in 0..n_tensors {
            let len = analytic[t].len();
            for e in [0, len / 2, len - 1] {
                let mut plus = net.clone();
                plus.tensors_mut("n")[t].data[e] += h;
                let mut minus = net.clone();
                minus.tensors_mut("n")[t].data[e] -= h;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
                assert!(
                    (fd - analytic[t][e]).abs() < 1e-6,
                    "tensor {t} elem {e}: {fd} vs {}",
                    analytic[t][e]
                );
            }
        }
    }

    #[test]
    fn output_width_tracks_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = tiny_stack(&mut rng);
        assert_eq!(net.output_width(16), 3);
        let names: Vec<String> = net.tensors("dec").into_iter().map(|t| t.name).collect();
        assert_eq!(names[0], "dec.0.weight");
        assert_eq!(names.last().unwrap(), "dec.5.bias");
    }
}
