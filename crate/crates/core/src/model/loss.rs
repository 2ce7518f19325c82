use ndarray::{Array2, ArrayView2, Zip};

use super::{sigmoid, EncoderOutput, Vae};
use crate::clustering::clamp_prob;
use crate::data::ImageBatch;
use crate::error::{DvcError, Result};
use crate::nn::Tape;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkLoss {
    /// `recon + kl`.
    pub total: f64,
    /// Mean per-sample binary cross-entropy summed over pixels.
    pub recon: f64,
    /// Mean per-sample `KL(q(z|x) ‖ N(0, I))`.
    pub kl: f64,
}

/// Mean over samples of `−Σ_p [x log x̂ + (1 − x) log(1 − x̂)]`, with `x̂`
/// clamped away from 0 and 1.
pub fn reconstruction_loss<F: Real>(x: &ImageBatch<F>, x_hat: &ImageBatch<F>) -> Result<f64> {
    if x.data.dim() != x_hat.data.dim() {
        return Err(DvcError::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            x.data.dim(),
            x_hat.data.dim()
        )));
    }
    if x.is_empty() {
        return Err(DvcError::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (&t, &p) in x.data.iter().zip(x_hat.data.iter()) {
        let (t, p) = (t.as_f64(), clamp_prob(p.as_f64()));
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(total / x.len() as f64)
}

/// Closed-form `KL(N(μ, diag σ²) ‖ N(0, I))` averaged over samples.
pub fn gaussian_prior_kl<F: Real>(out: &EncoderOutput<F>) -> f64 {
    let n = out.mu.nrows().max(1) as f64;
    let total: f64 = out
        .mu
        .iter()
        .zip(out.logvar.iter())
        .map(|(&m, &lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum();
    total / n
}

/// `softplus(l) − x·l`, the Bernoulli negative log-likelihood in logit form.
#[inline]
fn bce_with_logits(l: f64, x: f64) -> f64 {
    l.max(0.0) + (-l.abs()).exp().ln_1p() - x * l
}

/// Everything a backward pass needs from one forward evaluation.
pub struct ForwardPass<F> {
    encoder_tape: Tape<F>,
    features: Array2<F>,
    raw_logvar: Array2<F>,
    noise: Array2<F>,
    decoder_tape: Tape<F>,
    pub posterior: EncoderOutput<F>,
    pub z: Array2<F>,
    pub logits: Array2<F>,
    pub loss: NetworkLoss,
}

impl<F: Real> Vae<F> {
    /// encode → reparameterize (with the supplied noise) → decode, keeping tapes.
    pub fn forward_pass(&self, x: &ImageBatch<F>, noise: ArrayView2<'_, F>) -> Result<ForwardPass<F>> {
        self.check_batch(x)?;
        if x.is_empty() {
            return Err(DvcError::invalid("empty batch"));
        }
        let (features, encoder_tape) = self.encoder.forward_tape(x.data.view());
        let raw_logvar = self.logvar_head.forward(features.view());
        let posterior = self.heads(features.view());
        let z = super::reparameterize(&posterior, noise)?;
        let (logits, decoder_tape) = self.decoder.forward_tape(z.view());

        let n = x.len() as f64;
        let recon: f64 = Zip::from(&logits)
            .and(&x.data)
            .fold(0.0, |acc, &l, &t| acc + bce_with_logits(l.as_f64(), t.as_f64()))
            / n;
        let kl = gaussian_prior_kl(&posterior);
        Ok(ForwardPass {
            encoder_tape,
            features,
            raw_logvar,
            noise: noise.to_owned(),
            decoder_tape,
            posterior,
            z,
            logits,
            loss: NetworkLoss {
                total: recon + kl,
                recon,
                kl,
            },
        })
    }

    /// Gradient of `network_weight · L_n + Σ_i mu_grad_i · μ_i` with respect
    /// to every parameter. `mu_grad` injects an external loss defined on the
    /// posterior means (the clustering term).
    pub fn backward(
        &self,
        pass: &ForwardPass<F>,
        x: &ImageBatch<F>,
        network_weight: F,
        mu_grad: Option<ArrayView2<'_, F>>,
    ) -> Vae<F> {
        let mut grads = self.zeros_like();
        let n = F::of(x.len() as f64);
        let scale = network_weight / n;
        let half = F::of(0.5);

        let g_logits = Zip::from(&pass.logits)
            .and(&x.data)
            .map_collect(|&l, &t| (sigmoid(l) - t) * scale);
        let g_z = self.decoder.backward(&pass.decoder_tape, g_logits, &mut grads.decoder);

        let mut g_mu = Zip::from(&g_z)
            .and(&pass.posterior.mu)
            .map_collect(|&gz, &m| gz + scale * m);
        if let Some(extra) = mu_grad {
            g_mu += &extra;
        }
        let limit = F::of(super::LOGVAR_CLAMP);
        let mut g_logvar = Array2::<F>::zeros(g_z.raw_dim());
        Zip::from(&mut g_logvar)
            .and(&g_z)
            .and(&pass.posterior.logvar)
            .and(&pass.noise)
            .and(&pass.raw_logvar)
            .for_each(|g, &gz, &lv, &e, &raw| {
                *g = if raw < -limit || raw > limit {
                    F::zero()
                } else {
                    let sd = (half * lv).exp();
                    gz * half * sd * e + scale * half * (sd * sd - F::one())
                };
            });

        let mut g_features = self
            .mu_head
            .backward(pass.features.view(), g_mu.view(), &mut grads.mu_head);
        g_features += &self
            .logvar_head
            .backward(pass.features.view(), g_logvar.view(), &mut grads.logvar_head);
        self.encoder
            .backward(&pass.encoder_tape, g_features, &mut grads.encoder);
        grads
    }

    /// `L_n = L_r + KL(q(z|x) ‖ p(z))` for a batch and fixed noise.
    pub fn network_loss(&self, x: &ImageBatch<F>, noise: ArrayView2<'_, F>) -> Result<NetworkLoss> {
        let out = self.encode(x)?;
        let z = super::reparameterize(&out, noise)?;
        let logits = self.decode_logits(z.view())?;
        let recon = Zip::from(&logits)
            .and(&x.data)
            .fold(0.0, |acc, &l, &t| acc + bce_with_logits(l.as_f64(), t.as_f64()))
            / x.len() as f64;
        let kl = gaussian_prior_kl(&out);
        Ok(NetworkLoss {
            total: recon + kl,
            recon,
            kl,
        })
    }

    /// Posterior and network loss with `z = μ` (zero noise).
    pub fn noise_free_pass(&self, x: &ImageBatch<F>) -> Result<(EncoderOutput<F>, NetworkLoss)> {
        let out = self.encode(x)?;
        let logits = self.decode_logits(out.mu.view())?;
        let recon = Zip::from(&logits)
            .and(&x.data)
            .fold(0.0, |acc, &l, &t| acc + bce_with_logits(l.as_f64(), t.as_f64()))
            / x.len() as f64;
        let kl = gaussian_prior_kl(&out);
        Ok((
            out,
            NetworkLoss {
                total: recon + kl,
                recon,
                kl,
            },
        ))
    }

    pub fn network_loss_and_grads(&self, x: &ImageBatch<F>, noise: ArrayView2<'_, F>) -> Result<(NetworkLoss, Vae<F>)> {
        let pass = self.forward_pass(x, noise)?;
        let grads = self.backward(&pass, x, F::one(), None);
        Ok((pass.loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use crate::model::{build_model, ArchitectureSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn batch(values: Array2<f64>, shape: ImageShape) -> ImageBatch<f64> {
        ImageBatch::new(values, shape).unwrap()
    }

    #[test]
    fn recon_examples() {
        let s = ImageShape::new(1, 1, 1);
        let half = batch(array![[0.5]], s);
        assert_abs_diff_eq!(reconstruction_loss(&half, &half).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let ones = batch(array![[1.0]], s);
        assert!(reconstruction_loss(&ones, &ones).unwrap() < 1e-7);
        let zeros = batch(array![[0.0]], s);
        assert!(reconstruction_loss(&zeros, &zeros).unwrap() < 1e-7);
        assert!(reconstruction_loss(&ones, &batch(array![[0.5, 0.5]], ImageShape::new(1, 1, 2))).is_err());
    }

    #[test]
    fn prior_kl_examples() {
        let zero = EncoderOutput {
            mu: Array2::<f64>::zeros((3, 4)),
            logvar: Array2::zeros((3, 4)),
        };
        assert_eq!(gaussian_prior_kl(&zero), 0.0);
        let one = EncoderOutput {
            mu: array![[1.0f64]],
            logvar: array![[0.0]],
        };
        assert_abs_diff_eq!(gaussian_prior_kl(&one), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn logit_loss_agrees_with_probability_loss() {
        let shape = ImageShape::new(1, 2, 2);
        let model = build_model::<f64>(&ArchitectureSpec::mlp(shape), 1).unwrap();
        let x = batch(array![[0.0, 0.2, 0.9, 1.0], [0.5, 0.5, 0.1, 0.3]], shape);
        let noise = Array2::zeros((2, 10));
        let loss = model.network_loss(&x, noise.view()).unwrap();
        let out = model.encode(&x).unwrap();
        let x_hat = model.decode(out.mu.view()).unwrap();
        assert_abs_diff_eq!(loss.recon, reconstruction_loss(&x, &x_hat).unwrap(), epsilon = 1e-9);
        assert_abs_diff_eq!(loss.total, loss.recon + loss.kl, epsilon = 0.0);
        let pass = model.forward_pass(&x, noise.view()).unwrap();
        assert_eq!(pass.loss, loss);
    }

    #[test]
    fn injected_mu_gradient_reaches_encoder_only() {
        let shape = ImageShape::new(1, 2, 2);
        let model = build_model::<f64>(&ArchitectureSpec::mlp(shape), 4).unwrap();
        let x = batch(array![[0.1, 0.2, 0.3, 0.4]], shape);
        let noise = Array2::zeros((1, 10));
        let pass = model.forward_pass(&x, noise.view()).unwrap();
        let extra = Array2::from_elem((1, 10), 1.0);
        let grads = model.backward(&pass, &x, 0.0, Some(extra.view()));
        assert!(grads
            .decoder
            .tensors("d")
            .iter()
            .all(|t| t.data.iter().all(|&v| v == 0.0)));
        assert!(grads.mu_head.bias.iter().all(|&v| v == 1.0));
        assert!(grads.logvar_head.bias.iter().all(|&v| v == 0.0));
    }
}
