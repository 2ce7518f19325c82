//! Probabilistic encoder/decoder pair with a diagonal-Gaussian posterior and
//! a Bernoulli likelihood.

mod loss;

use ndarray::{Array2, ArrayView2, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use loss::{gaussian_prior_kl, reconstruction_loss, ForwardPass, NetworkLoss};

use crate::data::{ImageBatch, ImageShape};
use crate::error::{DvcError, Result};
use crate::nn::{Conv2d, ConvGeometry, Dense, Layer, Sequential, TensorMut, TensorRef, Upsample2x};
use crate::real::Real;
use crate::rng::{derive_rng, STREAM_INIT, STREAM_SAMPLE};

pub const DEFAULT_LATENT_DIM: usize = 10;
pub const DEFAULT_MLP_HIDDEN: [usize; 3] = [500, 500, 1000];
pub const LOGVAR_CLAMP: f64 = 10.0;
const ENCODER_KERNEL: usize = 5;
const DECODER_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Strided 5×5 convolutions down, resize-by-2 plus 3×3 convolutions up.
    ConvDvc1,
    /// Fully connected `d_x-500-500-1000-d_z` and its mirror.
    MlpDvc2,
}

impl std::str::FromStr for Variant {
    type Err = DvcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" | "conv_dvc1" | "dvc1" => Ok(Self::ConvDvc1),
            "mlp" | "mlp_dvc2" | "dvc2" => Ok(Self::MlpDvc2),
            other => Err(DvcError::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ConvDvc1 => "conv_dvc1",
            Self::MlpDvc2 => "mlp_dvc2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    pub input_shape: ImageShape,
    pub latent_dim: usize,
    /// Encoder channel widths, one per stride-2 stage (conv variant only).
    pub conv_channels: Vec<usize>,
    /// Hidden widths between input and latent (MLP variant only).
    pub mlp_dims: Vec<usize>,
}

impl ArchitectureSpec {
    pub fn mlp(input_shape: ImageShape) -> Self {
        Self {
            variant: Variant::MlpDvc2,
            input_shape,
            latent_dim: DEFAULT_LATENT_DIM,
            conv_channels: Vec::new(),
            mlp_dims: DEFAULT_MLP_HIDDEN.to_vec(),
        }
    }

    /// Three stages (32, 64, 128) for inputs of side ≥ 64, otherwise two (32, 64).
    pub fn conv(input_shape: ImageShape) -> Self {
        let channels = if input_shape.height.min(input_shape.width) >= 64 {
            vec![32, 64, 128]
        } else {
            vec![32, 64]
        };
        Self {
            variant: Variant::ConvDvc1,
            input_shape,
            latent_dim: DEFAULT_LATENT_DIM,
            conv_channels: channels,
            mlp_dims: Vec::new(),
        }
    }

    pub fn new(variant: Variant, input_shape: ImageShape) -> Self {
        match variant {
            Variant::ConvDvc1 => Self::conv(input_shape),
            Variant::MlpDvc2 => Self::mlp(input_shape),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() {
            return Err(DvcError::invalid("input shape has zero size"));
        }
        if self.latent_dim == 0 {
            return Err(DvcError::invalid("latent dimension must be positive"));
        }
        match self.variant {
            Variant::MlpDvc2 => {
                if self.mlp_dims.contains(&0) {
                    return Err(DvcError::invalid("MLP widths must be positive"));
                }
            }
            Variant::ConvDvc1 => {
                if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
                    return Err(DvcError::invalid("conv variant needs positive channel widths"));
                }
                let factor = 1usize << self.conv_channels.len();
                let ImageShape { height, width, .. } = self.input_shape;
                if height % factor != 0 || width % factor != 0 {
                    return Err(DvcError::invalid(format!(
                        "input {height}x{width} is not divisible by 2^{} for the conv variant",
                        self.conv_channels.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Spatial size at the encoder bottleneck (conv variant).
    pub fn bottleneck(&self) -> (usize, usize) {
        let factor = 1usize << self.conv_channels.len();
        (self.input_shape.height / factor, self.input_shape.width / factor)
    }

    /// Layer widths of the MLP encoder from input to latent.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_shape.len()];
        w.extend(&self.mlp_dims);
        w.push(self.latent_dim);
        w
    }

    /// Hex SHA-256 of the canonical JSON encoding; used to match checkpoints.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Posterior parameters for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<F> {
    pub mu: Array2<F>,
    pub logvar: Array2<F>,
}

/// The model: φ (encoder trunk and heads) and θ (decoder). The same type
/// doubles as the gradient container during training.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae<F> {
    spec: ArchitectureSpec,
    pub encoder: Sequential<F>,
    pub mu_head: Dense<F>,
    pub logvar_head: Dense<F>,
    /// Emits Bernoulli logits.
    pub decoder: Sequential<F>,
}

pub type ModelParameters<F> = Vae<F>;

/// Deterministic initialization of the architecture described by `spec`.
pub fn build_model<F: Real>(spec: &ArchitectureSpec, seed: u64) -> Result<Vae<F>> {
    spec.validate()?;
    let mut rng = derive_rng(seed, &[STREAM_INIT]);
    let d_z = spec.latent_dim;
    let (encoder, features, decoder) = match spec.variant {
        Variant::MlpDvc2 => {
            let widths = spec.encoder_widths();
            let hidden = &widths[..widths.len() - 1];
            let mut enc = Vec::new();
            for pair in hidden.windows(2) {
                enc.push(Layer::Dense(Dense::init(pair[0], pair[1], 2.0, &mut rng)));
                enc.push(Layer::Relu);
            }
            let features = *hidden.last().expect("input width");
            let mut mirror: Vec<usize> = widths.clone();
            mirror.reverse();
            let mut dec = Vec::new();
            for (i, pair) in mirror.windows(2).enumerate() {
                let last = i + 2 == mirror.len();
                dec.push(Layer::Dense(Dense::init(
                    pair[0],
                    pair[1],
                    if last { 1.0 } else { 2.0 },
                    &mut rng,
                )));
                if !last {
                    dec.push(Layer::Relu);
                }
            }
            (enc, features, dec)
        }
        Variant::ConvDvc1 => {
            let ImageShape {
                channels,
                mut height,
                mut width,
            } = spec.input_shape;
            let mut enc = Vec::new();
            let mut in_c = channels;
            for &out_c in &spec.conv_channels {
                let geom = ConvGeometry::new(in_c, height, width, out_c, ENCODER_KERNEL, 2, ENCODER_KERNEL / 2);
                enc.push(Layer::Conv(Conv2d::init(geom, &mut rng)));
                enc.push(Layer::Relu);
                height = geom.out_height();
                width = geom.out_width();
                in_c = out_c;
            }
            let features = in_c * height * width;
            let mut dec = vec![Layer::Dense(Dense::init(d_z, features, 2.0, &mut rng)), Layer::Relu];
            let mut targets: Vec<usize> = spec.conv_channels.iter().rev().skip(1).copied().collect();
            targets.push(channels);
            let mut c = in_c;
            for (i, &out_c) in targets.iter().enumerate() {
                dec.push(Layer::Upsample(Upsample2x::new(c, height, width)));
                height *= 2;
                width *= 2;
                let geom = ConvGeometry::new(c, height, width, out_c, DECODER_KERNEL, 1, DECODER_KERNEL / 2);
                let last = i + 1 == targets.len();
                dec.push(Layer::Conv(Conv2d::init_with_gain(
                    geom,
                    if last { 1.0 } else { 2.0 },
                    &mut rng,
                )));
                if !last {
                    dec.push(Layer::Relu);
                }
                c = out_c;
            }
            (enc, features, dec)
        }
    };
    Ok(Vae {
        spec: spec.clone(),
        encoder: Sequential::new(encoder),
        mu_head: Dense::init(features, d_z, 1.0, &mut rng),
        logvar_head: Dense::init(features, d_z, 1.0, &mut rng),
        decoder: Sequential::new(decoder),
    })
}

impl<F: Real> Vae<F> {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            encoder: self.encoder.zeros_like(),
            mu_head: self.mu_head.zeros_like(),
            logvar_head: self.logvar_head.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// Every parameter tensor, in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<TensorRef<'_, F>> {
        let mut out = self.encoder.tensors("encoder");
        out.extend(self.mu_head.tensors("mu_head"));
        out.extend(self.logvar_head.tensors("logvar_head"));
        out.extend(self.decoder.tensors("decoder"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, F>> {
        let mut out = self.encoder.tensors_mut("encoder");
        out.extend(self.mu_head.tensors_mut("mu_head"));
        out.extend(self.logvar_head.tensors_mut("logvar_head"));
        out.extend(self.decoder.tensors_mut("decoder"));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: F, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn check_batch(&self, x: &ImageBatch<F>) -> Result<()> {
        if x.shape != self.spec.input_shape || x.data.ncols() != self.spec.input_shape.len() {
            return Err(DvcError::invalid(format!(
                "batch shape {} does not match model input {}",
                x.shape, self.spec.input_shape
            )));
        }
        Ok(())
    }

    fn heads(&self, features: ArrayView2<'_, F>) -> EncoderOutput<F> {
        let limit = F::of(LOGVAR_CLAMP);
        EncoderOutput {
            mu: self.mu_head.forward(features),
            logvar: self
                .logvar_head
                .forward(features)
                .mapv_into(|v| v.max(-limit).min(limit)),
        }
    }

    pub fn encode(&self, x: &ImageBatch<F>) -> Result<EncoderOutput<F>> {
        self.check_batch(x)?;
        let features = self.encoder.forward(x.data.view());
        Ok(self.heads(features.view()))
    }

    pub fn decode_logits(&self, z: ArrayView2<'_, F>) -> Result<Array2<F>> {
        if z.ncols() != self.spec.latent_dim {
            return Err(DvcError::invalid(format!(
                "latent codes have {} dims, model expects {}",
                z.ncols(),
                self.spec.latent_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(DvcError::domain("non-finite latent code"));
        }
        Ok(self.decoder.forward(z))
    }

    /// Bernoulli means, clamped strictly inside `(0, 1)`.
    pub fn decode(&self, z: ArrayView2<'_, F>) -> Result<ImageBatch<F>> {
        let logits = self.decode_logits(z)?;
        let eps = F::epsilon();
        let data = logits.mapv_into(|l| sigmoid(l).max(eps).min(F::one() - eps));
        Ok(ImageBatch {
            data,
            shape: self.spec.input_shape,
        })
    }

    /// Decodes `n` draws from the standard-normal prior.
    pub fn sample_images(&self, n: usize, seed: u64) -> Result<ImageBatch<F>> {
        let mut rng = derive_rng(seed, &[STREAM_SAMPLE]);
        let z = Array2::from_shape_simple_fn((n, self.spec.latent_dim), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            F::of(v)
        });
        self.decode(z.view())
    }
}

/// `z = μ + exp(½ logvar) ⊙ ε`.
pub fn reparameterize<F: Real>(out: &EncoderOutput<F>, noise: ArrayView2<'_, F>) -> Result<Array2<F>> {
    if noise.dim() != out.mu.dim() {
        return Err(DvcError::invalid(format!(
            "noise shape {:?} does not match latent shape {:?}",
            noise.dim(),
            out.mu.dim()
        )));
    }
    let half = F::of(0.5);
    Ok(Zip::from(&out.mu)
        .and(&out.logvar)
        .and(noise)
        .map_collect(|&m, &lv, &e| m + (half * lv).exp() * e))
}

/// Standard-normal noise matrix drawn from `rng`.
pub fn standard_normal<F: Real>(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        F::of(v)
    })
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mnist_shape() -> ImageShape {
        ImageShape::new(1, 28, 28)
    }

    #[test]
    fn mlp_widths_follow_default_stack() {
        let spec = ArchitectureSpec::mlp(mnist_shape());
        assert_eq!(spec.encoder_widths(), vec![784, 500, 500, 1000, 10]);
        let model = build_model::<f32>(&spec, 0).unwrap();
        let shapes: Vec<Vec<usize>> = model.tensors().iter().map(|t| t.shape.clone()).collect();
        assert_eq!(shapes[0], vec![784, 500]);
        assert_eq!(shapes[2], vec![500, 500]);
        assert_eq!(shapes[4], vec![500, 1000]);
        assert_eq!(shapes[6], vec![1000, 10]);
        assert_eq!(shapes[8], vec![1000, 10]);
        assert_eq!(shapes[10], vec![10, 1000]);
        assert_eq!(shapes.last().unwrap(), &vec![784]);
        let expected = (784 * 500 + 500)
            + (500 * 500 + 500)
            + (500 * 1000 + 1000)
            + 2 * (1000 * 10 + 10)
            + (10 * 1000 + 1000)
            + (1000 * 500 + 500)
            + (500 * 500 + 500)
            + (500 * 784 + 784);
        assert_eq!(model.parameter_count(), expected);
    }

    #[test]
    fn conv_bottlenecks() {
        let spec = ArchitectureSpec::conv(mnist_shape());
        assert_eq!(spec.conv_channels, vec![32, 64]);
        assert_eq!(spec.bottleneck(), (7, 7));
        let big = ArchitectureSpec::conv(ImageShape::new(1, 128, 128));
        assert_eq!(big.conv_channels, vec![32, 64, 128]);
        assert_eq!(big.bottleneck(), (16, 16));
        let model = build_model::<f32>(&spec, 1).unwrap();
        assert_eq!(model.encoder.output_width(784), 64 * 7 * 7);
        assert_eq!(model.decoder.output_width(10), 784);
    }

    #[test]
    fn conv_rejects_indivisible_input() {
        let spec = ArchitectureSpec::conv(ImageShape::new(1, 30, 30));
        assert!(matches!(
            build_model::<f32>(&spec, 0),
            Err(DvcError::InvalidArgument(_))
        ));
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ArchitectureSpec::mlp(ImageShape::new(1, 4, 4));
        assert_eq!(
            build_model::<f64>(&spec, 5).unwrap(),
            build_model::<f64>(&spec, 5).unwrap()
        );
        assert_ne!(
            build_model::<f64>(&spec, 5).unwrap(),
            build_model::<f64>(&spec, 6).unwrap()
        );
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let spec = ArchitectureSpec::conv(mnist_shape());
        let model = build_model::<f32>(&spec, 2).unwrap();
        let x = ImageBatch::new(Array2::from_elem((3, 784), 0.5f32), mnist_shape()).unwrap();
        let out = model.encode(&x).unwrap();
        assert_eq!(out.mu.dim(), (3, 10));
        assert_eq!(out.logvar.dim(), (3, 10));
        assert_eq!(out, model.encode(&x).unwrap());
        let x6 = ImageBatch::new(Array2::from_elem((6, 784), 0.5f32), mnist_shape()).unwrap();
        assert_eq!(model.encode(&x6).unwrap().mu.nrows(), 6);
        let wrong = ImageBatch::new(Array2::from_elem((1, 16), 0.5f32), ImageShape::new(1, 4, 4)).unwrap();
        assert!(model.encode(&wrong).is_err());
    }

    #[test]
    fn conv_decoder_restores_large_inputs() {
        let shape = ImageShape::new(1, 128, 128);
        let model = build_model::<f32>(&ArchitectureSpec::conv(shape), 0).unwrap();
        let z = Array2::<f32>::zeros((1, 10));
        let out = model.decode(z.view()).unwrap();
        assert_eq!(out.shape, shape);
        assert_eq!(out.data.ncols(), 128 * 128);
    }

    #[test]
    fn decode_range_and_determinism() {
        let model = build_model::<f32>(&ArchitectureSpec::mlp(ImageShape::new(1, 4, 4)), 3).unwrap();
        let z = array![[100.0f32, -100.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 50.0]];
        let out = model.decode(z.view()).unwrap();
        assert!(out.data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(out, model.decode(z.view()).unwrap());
        assert!(model.decode(array![[0.0f32]].view()).is_err());
    }

    #[test]
    fn reparameterize_examples() {
        let out = EncoderOutput {
            mu: array![[0.5f64, -1.0]],
            logvar: array![[0.0, 0.0]],
        };
        assert_eq!(reparameterize(&out, array![[0.0, 0.0]].view()).unwrap(), out.mu);
        assert_eq!(
            reparameterize(&out, array![[1.0, 2.0]].view()).unwrap(),
            array![[1.5, 1.0]]
        );
        let out = EncoderOutput {
            mu: array![[0.0f64]],
            logvar: array![[4f64.ln()]],
        };
        let z = reparameterize(&out, array![[1.0]].view()).unwrap();
        assert!((z[[0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn samples_are_seeded() {
        let model = build_model::<f32>(&ArchitectureSpec::mlp(ImageShape::new(1, 4, 4)), 3).unwrap();
        let a = model.sample_images(5, 1).unwrap();
        assert_eq!(a.data.dim(), (5, 16));
        assert!(a.data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a, model.sample_images(5, 1).unwrap());
        assert_ne!(a, model.sample_images(5, 2).unwrap());
    }

    #[test]
    fn fingerprint_tracks_spec() {
        let a = ArchitectureSpec::mlp(mnist_shape());
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.latent_dim = 5;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
