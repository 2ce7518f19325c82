use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{init_normal, TensorMut, TensorRef};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        in_height: usize,
        in_width: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            in_height,
            in_width,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// 2-D convolution lowered to a matrix product over im2col patches.
/// `weight` is `(C_in·k·k) × C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<F> {
    geometry: ConvGeometry,
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Conv2d<F> {
    pub fn init(geometry: ConvGeometry, rng: &mut impl Rng) -> Self {
        Self::init_with_gain(geometry, 2.0, rng)
    }

    pub fn init_with_gain(geometry: ConvGeometry, gain: f64, rng: &mut impl Rng) -> Self {
        let fan_in = geometry.patch_len();
        Self {
            geometry,
            weight: init_normal(fan_in, geometry.out_channels, fan_in, gain, rng),
            bias: Array1::zeros(geometry.out_channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            geometry: self.geometry,
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    fn im2col(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        let g = &self.geometry;
        let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
        let n = x.nrows();
        let mut cols = Array2::<F>::zeros((n * oh * ow, g.patch_len()));
        for (s, img) in x.outer_iter().enumerate() {
            let img = img.as_slice().expect("standard layout");
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut row = cols.row_mut((s * oh + oy) * ow + ox);
                    let row = row.as_slice_mut().expect("standard layout");
                    for c in 0..g.in_channels {
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.in_height as isize {
                                continue;
                            }
                            let base = (c * g.in_height + iy as usize) * g.in_width;
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix >= 0 && ix < g.in_width as isize {
                                    row[(c * k + ky) * k + kx] = img[base + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Returns the output (`N × C_out·H_out·W_out`) and the patch matrix for backward.
    pub fn forward(&self, x: ArrayView2<'_, F>) -> (Array2<F>, Array2<F>) {
        let g = &self.geometry;
        let cols = self.im2col(x);
        let mut y = cols.dot(&self.weight);
        y += &self.bias;
        let positions = g.out_height() * g.out_width();
        let n = x.nrows();
        let mut out = Array2::<F>::zeros((n, g.out_len()));
        for s in 0..n {
            let mut dst = out.row_mut(s);
            for p in 0..positions {
                let src = y.row(s * positions + p);
                for o in 0..g.out_channels {
                    dst[o * positions + p] = src[o];
                }
            }
        }
        (out, cols)
    }

    pub fn backward(&self, cols: ArrayView2<'_, F>, grad: ArrayView2<'_, F>, acc: &mut Self) -> Array2<F> {
        let g = &self.geometry;
        let positions = g.out_height() * g.out_width();
        let n = grad.nrows();
        let mut gy = Array2::<F>::zeros((n * positions, g.out_channels));
        for s in 0..n {
            let src = grad.row(s);
            for p in 0..positions {
                let mut dst = gy.row_mut(s * positions + p);
                for o in 0..g.out_channels {
                    dst[o] = src[o * positions + p];
                }
            }
        }
        general_mat_mul(F::one(), &cols.t(), &gy, F::one(), &mut acc.weight);
        acc.bias += &gy.sum_axis(Axis(0));
        let dcols = gy.dot(&self.weight.t());
        self.col2im(dcols.view(), n)
    }

    fn col2im(&self, dcols: ArrayView2<'_, F>, n: usize) -> Array2<F> {
        let g = &self.geometry;
        let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
        let mut dx = Array2::<F>::zeros((n, g.in_len()));
        for s in 0..n {
            let mut img = dx.row_mut(s);
            let img = img.as_slice_mut().expect("standard layout");
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = dcols.row((s * oh + oy) * ow + ox);
                    for c in 0..g.in_channels {
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.in_height as isize {
                                continue;
                            }
                            let base = (c * g.in_height + iy as usize) * g.in_width;
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix >= 0 && ix < g.in_width as isize {
                                    img[base + ix as usize] += row[(c * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
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

/// Nearest-neighbour resize by a factor of two in both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Upsample2x {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Upsample2x {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn out_len(&self) -> usize {
        self.channels * self.height * self.width * 4
    }

    pub fn forward<F: Real>(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        let (h, w) = (self.height, self.width);
        let mut out = Array2::<F>::zeros((x.nrows(), self.out_len()));
        for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            for c in 0..self.channels {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(c * 2 * h + y) * 2 * w + xx] = src[(c * h + y / 2) * w + xx / 2];
                    }
                }
            }
        }
        out
    }

    pub fn backward<F: Real>(&self, g: ArrayView2<'_, F>) -> Array2<F> {
        let (h, w) = (self.height, self.width);
        let mut dx = Array2::<F>::zeros((g.nrows(), self.channels * h * w));
        for (src, mut dst) in g.outer_iter().zip(dx.outer_iter_mut()) {
            for c in 0..self.channels {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(c * h + y / 2) * w + xx / 2] += src[(c * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
        }
        dx
    }
}
