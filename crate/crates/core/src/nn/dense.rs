use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{init_normal, TensorMut, TensorRef};
use crate::real::Real;

/// Fully connected layer `y = x W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Dense<F> {
    /// `gain` 2 suits a following ReLU, 1 a linear or sigmoid output.
    pub fn init(in_features: usize, out_features: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self {
            weight: init_normal(in_features, out_features, in_features, gain, rng),
            bias: Array1::zeros(out_features),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates `∂W = xᵀ g`, `∂b = Σ g` into `grad`; returns `g Wᵀ`.
    pub fn backward(&self, x: ArrayView2<'_, F>, g: ArrayView2<'_, F>, grad: &mut Self) -> Array2<F> {
        general_mat_mul(F::one(), &x.t(), &g, F::one(), &mut grad.weight);
        grad.bias += &g.sum_axis(Axis(0));
        g.dot(&self.weight.t())
    }

    pub fn tensors(&self, prefix: &str) -> [TensorRef<'_, F>; 2] {
        [
            TensorRef {
                name: format!("{prefix}.weight"),
                shape: self.weight.shape().to_vec(),
                data: self.weight.as_slice().expect("standard layout"),
            },
            TensorRef {
                name: format!("{prefix}.bias"),
                shape: self.bias.shape().to_vec(),
                data: self.bias.as_slice().expect("standard layout"),
            },
        ]
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> [TensorMut<'_, F>; 2] {
        let wshape = self.weight.shape().to_vec();
        let bshape = self.bias.shape().to_vec();
        [
            TensorMut {
                name: format!("{prefix}.weight"),
                shape: wshape,
                data: self.weight.as_slice_mut().expect("standard layout"),
            },
            TensorMut {
                name: format!("{prefix}.bias"),
                shape: bshape,
                data: self.bias.as_slice_mut().expect("standard layout"),
            },
        ]
    }
}
