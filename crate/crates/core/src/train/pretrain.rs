use log::{debug, info};
use ndarray::{Array2, Zip};
use rand::Rng;

use super::{lr_at, LossRecord, NoopObserver, Sgd, TrainObserver, TrainSchedule};
use crate::data::{BatchSampler, Dataset};
use crate::error::{DvcError, Result};
use crate::model::{sigmoid, standard_normal, Vae, Variant};
use crate::nn::{Dense, Layer};
use crate::real::Real;
use crate::rng::{derive_rng, derive_seed, STREAM_PRETRAIN};

/// Minimizes the network loss for `schedule.pretrain_iterations` mini-batch
/// steps (after the optional layer-wise stage). Returns one record per step.
pub fn pretrain<F: Real>(model: &mut Vae<F>, data: &Dataset, schedule: &TrainSchedule) -> Result<Vec<LossRecord>> {
    pretrain_observed(model, data, schedule, &mut NoopObserver)
}

pub fn pretrain_observed<F: Real>(
    model: &mut Vae<F>,
    data: &Dataset,
    schedule: &TrainSchedule,
    observer: &mut dyn TrainObserver<F>,
) -> Result<Vec<LossRecord>> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(DvcError::invalid("cannot pretrain on an empty dataset"));
    }
    if schedule.pretrain_mode == super::PretrainMode::LayerWise {
        layer_wise(model, data, schedule)?;
    }
    let sampler = BatchSampler::new(
        data.len(),
        schedule.batch_size,
        derive_seed(schedule.seed, &[STREAM_PRETRAIN]),
        true,
    );
    let opt = Sgd::new(schedule.momentum, schedule.weight_decay);
    let mut velocity = None;
    let mut history = Vec::with_capacity(schedule.pretrain_iterations);
    for it in 0..schedule.pretrain_iterations {
        let x = data.batch::<F>(&sampler.batch_at(it));
        let mut rng = derive_rng(schedule.seed, &[STREAM_PRETRAIN, 1, it as u64]);
        let noise = standard_normal::<F>(x.len(), model.latent_dim(), &mut rng);
        let (loss, grads) = model.network_loss_and_grads(&x, noise.view())?;
        let lr = lr_at(it, schedule);
        let record = LossRecord {
            iteration: it,
            l_c: 0.0,
            l_r: loss.total,
            total: loss.total,
            lr,
            label_change: None,
        };
        if !record.is_finite() {
            let err = DvcError::NonFiniteLoss {
                phase: "pretrain",
                iteration: it,
            };
            observer.on_failure(model, &err);
            return Err(err);
        }
        opt.step(model, &grads, &mut velocity, lr);
        if it % 500 == 0 {
            debug!("pretrain {it}: recon {:.3} kl {:.3}", loss.recon, loss.kl);
        }
        observer.on_record(&record);
        history.push(record);
    }
    if let Some(last) = history.last() {
        info!(
            "pretraining done after {} iterations, network loss {:.4}",
            history.len(),
            last.l_r
        );
    }
    Ok(history)
}

fn dense_layers_mut<F>(layers: &mut [Layer<F>]) -> Vec<&mut Dense<F>> {
    layers
        .iter_mut()
        .filter_map(|l| match l {
            Layer::Dense(d) => Some(d),
            _ => None,
        })
        .collect()
}

fn dropout<F: Real>(x: &Array2<F>, rate: f64, rng: &mut impl Rng) -> Array2<F> {
    if rate == 0.0 {
        return x.clone();
    }
    let keep = F::of(1.0 / (1.0 - rate));
    x.mapv(|v| {
        if rng.random::<f64>() < rate {
            F::zero()
        } else {
            v * keep
        }
    })
}

/// Greedy stacked denoising pretraining. Encoder layer `l` and its mirror in
/// the decoder form a shallow autoencoder on the (fixed) activations of the
/// layers below, trained with input dropout. The outermost pair reconstructs
/// pixels with cross-entropy, inner pairs use squared error; the innermost
/// pair is the mean head with the first decoder layer. The log-variance head
/// keeps its initialization.
fn layer_wise<F: Real>(model: &mut Vae<F>, data: &Dataset, schedule: &TrainSchedule) -> Result<()> {
    if model.spec().variant != Variant::MlpDvc2 {
        return Err(DvcError::invalid("layer-wise pretraining needs the dense architecture"));
    }
    let depth = model.spec().mlp_dims.len();
    let sampler = BatchSampler::new(
        data.len(),
        schedule.batch_size,
        derive_seed(schedule.seed, &[STREAM_PRETRAIN, 2]),
        true,
    );
    let opt_lr = schedule.base_lr;
    for level in 0..=depth {
        for it in 0..schedule.layerwise_iterations {
            let x = data
                .batch::<F>(&sampler.batch_at(level * schedule.layerwise_iterations + it))
                .data;
            // Activations feeding this level, from the already-trained layers.
            let mut input = x;
            {
                let enc = dense_layers_mut(&mut model.encoder.layers);
                for d in enc.into_iter().take(level) {
                    input = d.forward(input.view()).mapv_into(|v| v.max(F::zero()));
                }
            }
            let mut rng = derive_rng(schedule.seed, &[STREAM_PRETRAIN, 3, level as u64, it as u64]);
            let noisy = dropout(&input, schedule.dropout, &mut rng);

            let mut dec_layers = dense_layers_mut(&mut model.decoder.layers);
            let dec = &mut *dec_layers.remove(depth - level);
            let mut enc_layers = dense_layers_mut(&mut model.encoder.layers);
            let enc: &mut Dense<F> = if level < depth {
                &mut *enc_layers.remove(level)
            } else {
                &mut model.mu_head
            };
            let inner = level == depth;
            let pre = enc.forward(noisy.view());
            let hidden = if inner {
                pre.clone()
            } else {
                pre.mapv(|v| v.max(F::zero()))
            };
            let out = dec.forward(hidden.view());
            let n = F::of(input.nrows() as f64);
            let (g_out, loss) = if level == 0 {
                let g = Zip::from(&out).and(&input).map_collect(|&l, &t| (sigmoid(l) - t) / n);
                (g, f64::NAN)
            } else {
                let recon = out.mapv(|v| v.max(F::zero()));
                let g = Zip::from(&recon).and(&input).and(&out).map_collect(|&r, &t, &o| {
                    if o > F::zero() {
                        (r - t) / n
                    } else {
                        F::zero()
                    }
                });
                let loss = Zip::from(&recon)
                    .and(&input)
                    .fold(0.0, |acc, &r, &t| acc + 0.5 * (r - t).as_f64().powi(2))
                    / input.nrows() as f64;
                (g, loss)
            };
            let mut g_dec = dec.zeros_like();
            let mut g_hidden = dec.backward(hidden.view(), g_out.view(), &mut g_dec);
            if !inner {
                Zip::from(&mut g_hidden).and(&pre).for_each(|g, &p| {
                    if p <= F::zero() {
                        *g = F::zero();
                    }
                });
            }
            let mut g_enc = enc.zeros_like();
            enc.backward(noisy.view(), g_hidden.view(), &mut g_enc);
            let lr = F::of(opt_lr);
            for (d, g) in [(&mut *enc, &g_enc), (&mut *dec, &g_dec)] {
                d.weight.scaled_add(-lr, &g.weight);
                d.bias.scaled_add(-lr, &g.bias);
            }
            if !d_finite(enc) || !d_finite(dec) {
                return Err(DvcError::NonFiniteLoss {
                    phase: "layer-wise pretrain",
                    iteration: it,
                });
            }
            if it % 500 == 0 && level > 0 {
                debug!("layer-wise level {level} iteration {it}: squared error {loss:.4}");
            }
        }
        info!("layer-wise pretraining: level {level} done");
    }
    Ok(())
}

fn d_finite<F: Real>(d: &Dense<F>) -> bool {
    d.weight.iter().chain(d.bias.iter()).all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::model::{build_model, ArchitectureSpec};
    use crate::train::PretrainMode;
    use ndarray::Array2;

    fn held_out_recon(model: &Vae<f32>, data: &Dataset) -> f64 {
        let x = data.all::<f32>();
        let noise = Array2::zeros((x.len(), model.latent_dim()));
        model.network_loss(&x, noise.view()).unwrap().recon
    }

    /// Every sixth sample is held out.
    fn blobs() -> (Dataset, Dataset) {
        let all = synth_blobs(3, 120, 64, 10.0, 1.0, 11).unwrap();
        let split = |held: bool| {
            let idx: Vec<usize> = (0..all.len()).filter(|i| (i % 6 == 0) == held).collect();
            let images = all.images.select(ndarray::Axis(0), &idx);
            Dataset::new(images, None, "blobs", all.shape).unwrap()
        };
        (split(false), split(true))
    }

    fn small_spec(data: &Dataset) -> ArchitectureSpec {
        let mut spec = ArchitectureSpec::mlp(data.shape);
        spec.mlp_dims = vec![32, 16];
        spec.latent_dim = 3;
        spec
    }

    #[test]
    fn pretraining_reduces_held_out_reconstruction() {
        let (train, held) = blobs();
        let mut model = build_model::<f32>(&small_spec(&train), 1).unwrap();
        let before = held_out_recon(&model, &held);
        let schedule = TrainSchedule {
            pretrain_iterations: 200,
            batch_size: 32,
            ..Default::default()
        };
        let history = pretrain(&mut model, &train, &schedule).unwrap();
        assert_eq!(history.len(), 200);
        assert!(history.iter().all(|r| r.l_c == 0.0 && r.label_change.is_none()));
        assert!(held_out_recon(&model, &held) < before);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let (train, _) = blobs();
        let model = build_model::<f32>(&small_spec(&train), 1).unwrap();
        let mut trained = model.clone();
        let schedule = TrainSchedule {
            pretrain_iterations: 0,
            ..Default::default()
        };
        assert!(pretrain(&mut trained, &train, &schedule).unwrap().is_empty());
        assert_eq!(trained, model);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let (train, _) = blobs();
        let schedule = TrainSchedule {
            pretrain_iterations: 30,
            batch_size: 16,
            seed: 9,
            momentum: 0.9,
            ..Default::default()
        };
        let run = || {
            let mut m = build_model::<f32>(&small_spec(&train), 1).unwrap();
            let h = pretrain(&mut m, &train, &schedule).unwrap();
            (m, h)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn layer_wise_runs_and_improves() {
        let (train, held) = blobs();
        let mut model = build_model::<f32>(&small_spec(&train), 2).unwrap();
        let before = held_out_recon(&model, &held);
        let schedule = TrainSchedule {
            pretrain_iterations: 50,
            layerwise_iterations: 100,
            batch_size: 32,
            pretrain_mode: PretrainMode::LayerWise,
            ..Default::default()
        };
        pretrain(&mut model, &train, &schedule).unwrap();
        assert!(model.is_finite());
        assert!(held_out_recon(&model, &held) < before);
    }

    #[test]
    fn layer_wise_rejects_conv() {
        let train = synth_blobs(3, 10, 64, 10.0, 1.0, 1).unwrap();
        let mut model = build_model::<f32>(&ArchitectureSpec::conv(train.shape), 0).unwrap();
        let schedule = TrainSchedule {
            pretrain_mode: PretrainMode::LayerWise,
            ..Default::default()
        };
        assert!(pretrain(&mut model, &train, &schedule).is_err());
    }
}
