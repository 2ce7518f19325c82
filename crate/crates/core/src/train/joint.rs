use log::{debug, info, warn};
use ndarray::{s, Array2, Axis};

use super::{lr_at, total_loss, LossRecord, NoopObserver, Sgd, TrainObserver, TrainSchedule, TrainState};
use crate::clustering::{
    assign_labels, hard_counts, kl_divergence, kl_gradients, kmeans, label_change_fraction, soft_assign,
    student_t_assign, target_distribution, Centroids, SoftAssignment, TargetDistribution,
};
use crate::data::{BatchSampler, Dataset};
use crate::error::{DvcError, Result};
use crate::model::{standard_normal, Vae};
use crate::real::Real;
use crate::rng::{derive_rng, derive_seed, STREAM_JOINT};

const EMBED_CHUNK: usize = 1024;

/// Summary of one target update, handed to observers.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetUpdate {
    pub iteration: usize,
    pub label_change: f64,
    pub l_c: f64,
    pub l_r: f64,
    /// Clusters that were empty and got re-seeded.
    pub reseeded: Vec<usize>,
    pub counts: Vec<usize>,
}

/// Noise-free latent codes (`z = μ`) for every sample, as `f64`.
pub fn embed_all<F: Real>(model: &Vae<F>, data: &Dataset) -> Result<Array2<f64>> {
    Ok(full_pass(model, data)?.0)
}

/// Embeddings plus the mean network loss over the dataset.
fn full_pass<F: Real>(model: &Vae<F>, data: &Dataset) -> Result<(Array2<f64>, f64)> {
    let mut z = Array2::<f64>::zeros((data.len(), model.latent_dim()));
    let mut loss_sum = 0.0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EMBED_CHUNK).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let (out, loss) = model.noise_free_pass(&data.batch::<F>(&idx))?;
        z.slice_mut(s![start..end, ..]).assign(&out.mu.mapv(|v| v.as_f64()));
        loss_sum += loss.total * (end - start) as f64;
        start = end;
    }
    Ok((z, loss_sum / data.len().max(1) as f64))
}

/// K-means on the noise-free embeddings of a (pretrained) model.
pub fn init_centroids<F: Real>(
    model: &Vae<F>,
    data: &Dataset,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<(Centroids, Vec<usize>)> {
    if k < 2 {
        return Err(DvcError::invalid(format!("need at least 2 clusters, got {k}")));
    }
    if data.len() < k {
        return Err(DvcError::invalid(format!(
            "{} samples cannot form {k} clusters",
            data.len()
        )));
    }
    let z = embed_all(model, data)?;
    let result = kmeans(z.view(), k, seed, restarts)?;
    Ok((result.centroids, result.labels))
}

/// Moves each empty cluster's centroid onto the point farthest from its own
/// centroid. Returns the re-seeded cluster indices.
fn reseed_empty(z: &Array2<f64>, centroids: &mut Centroids, labels: &[usize]) -> Vec<usize> {
    let counts = hard_counts(labels, centroids.k());
    let empty: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] == 0).collect();
    if empty.is_empty() {
        return empty;
    }
    let mut dist: Vec<(f64, usize)> = labels
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let d = (&z.row(i) - &centroids.values().row(j)).mapv(|v| v * v).sum();
            (d, i)
        })
        .collect();
    dist.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (&j, &(_, i)) in empty.iter().zip(&dist) {
        centroids.values_mut().row_mut(j).assign(&z.row(i));
    }
    empty
}

fn target_step(
    z: &Array2<f64>,
    centroids: &mut Centroids,
    schedule: &TrainSchedule,
) -> Result<(SoftAssignment, TargetDistribution, Vec<usize>, Vec<usize>)> {
    let mut q = soft_assign(z.view(), centroids, schedule.alpha)?;
    let mut labels = assign_labels(&q);
    let reseeded = reseed_empty(z, centroids, &labels);
    if !reseeded.is_empty() {
        warn!("re-seeded empty clusters {reseeded:?} from the farthest embedded points");
        q = soft_assign(z.view(), centroids, schedule.alpha)?;
        labels = assign_labels(&q);
    }
    let (p, _) = target_distribution(&q, schedule.target, schedule.gamma)?;
    Ok((q, p, labels, reseeded))
}

/// Runs the joint phase from a fresh or resumed state.
pub fn joint_train<F: Real>(state: TrainState<F>, data: &Dataset, schedule: &TrainSchedule) -> Result<TrainState<F>> {
    joint_train_observed(state, data, schedule, &mut NoopObserver)
}

/// Every `update_interval` iterations (starting at 0) the whole dataset is
/// embedded and the target `P`, the labels and the label-change fraction are
/// recomputed; that iteration takes no gradient step. Training stops when a
/// label-change fraction after the first update falls below `delta`, or at
/// `max_iterations`. All other iterations take one SGD step on
/// `λ·L_c + (1 − λ)·L_n` over a mini-batch (`L_c` summed over the batch,
/// `L_n` averaged), updating the network and the centroids.
pub fn joint_train_observed<F: Real>(
    mut state: TrainState<F>,
    data: &Dataset,
    schedule: &TrainSchedule,
    observer: &mut dyn TrainObserver<F>,
) -> Result<TrainState<F>> {
    schedule.validate()?;
    let n = data.len();
    if n < state.centroids.k() {
        return Err(DvcError::invalid(format!(
            "{n} samples cannot form {} clusters",
            state.centroids.k()
        )));
    }
    if state.centroids.dim() != state.params.latent_dim() {
        return Err(DvcError::invalid(format!(
            "centroids have {} dims, latent space has {}",
            state.centroids.dim(),
            state.params.latent_dim()
        )));
    }
    if !state.last_labels.is_empty() && state.last_labels.len() != n {
        return Err(DvcError::Consistency(format!(
            "state holds {} labels for {n} samples",
            state.last_labels.len()
        )));
    }
    let sampler = BatchSampler::new(
        n,
        schedule.batch_size,
        derive_seed(schedule.seed, &[STREAM_JOINT]),
        true,
    );
    let opt = Sgd::new(schedule.momentum, schedule.weight_decay);
    let lambda = schedule.lambda;

    while state.iteration < schedule.max_iterations && !state.converged {
        let it = state.iteration;
        let lr = lr_at(it, schedule);

        if it.is_multiple_of(schedule.update_interval) {
            let (z, l_r) = full_pass(&state.params, data)?;
            let (q, p, labels, reseeded) = target_step(&z, &mut state.centroids, schedule)?;
            let l_c = kl_divergence(p.view(), q.view())?;
            let change = if state.last_labels.is_empty() {
                1.0
            } else {
                label_change_fraction(&state.last_labels, &labels)?
            };
            let record = LossRecord {
                iteration: it,
                l_c,
                l_r,
                total: total_loss(l_c, l_r, lambda),
                lr,
                label_change: Some(change),
            };
            if !record.is_finite() {
                let err = DvcError::NonFiniteLoss {
                    phase: "joint",
                    iteration: it,
                };
                observer.on_failure(&state.params, &err);
                return Err(err);
            }
            let update = TargetUpdate {
                iteration: it,
                label_change: change,
                l_c,
                l_r,
                reseeded,
                counts: hard_counts(&labels, state.centroids.k()),
            };
            state.target_updates += 1;
            state.last_target = Some(p);
            state.last_labels = labels;
            if state.target_updates > 1 && change < schedule.delta {
                state.converged = true;
            }
            info!(
                "iteration {it}: L_c {l_c:.5} L_n {l_r:.3} label change {change:.5}{}",
                if state.converged { " (converged)" } else { "" }
            );
            observer.on_record(&record);
            state.loss_history.push(record);
            state.iteration += 1;
            observer.on_target_update(&state, &update)?;
            continue;
        }

        let target = state
            .last_target
            .as_ref()
            .ok_or_else(|| DvcError::Consistency(format!("no target distribution at iteration {it}")))?;
        let idx = sampler.batch_at(it);
        let x = data.batch::<F>(&idx);
        let mut rng = derive_rng(schedule.seed, &[STREAM_JOINT, 1, it as u64]);
        let noise = standard_normal::<F>(idx.len(), state.params.latent_dim(), &mut rng);
        let pass = state.params.forward_pass(&x, noise.view())?;

        let mu = pass.posterior.mu.mapv(|v| v.as_f64());
        let q = student_t_assign(mu.view(), state.centroids.view(), schedule.alpha)?;
        let p = target.values().select(Axis(0), &idx);
        let l_c = kl_divergence(p.view(), q.view())?;
        let l_r = pass.loss.total;
        let record = LossRecord {
            iteration: it,
            l_c,
            l_r,
            total: total_loss(l_c, l_r, lambda),
            lr,
            label_change: None,
        };
        if !record.is_finite() {
            let err = DvcError::NonFiniteLoss {
                phase: "joint",
                iteration: it,
            };
            observer.on_failure(&state.params, &err);
            return Err(err);
        }

        let mut mu_grad = None;
        let mut centroid_grad = None;
        if schedule.clustering_gradient {
            let (gz, gm) = kl_gradients(q.view(), p.view(), mu.view(), state.centroids.view(), schedule.alpha)?;
            mu_grad = Some(gz.mapv(|v| F::of(v * lambda)));
            centroid_grad = Some(gm * lambda);
        }
        let grads = state
            .params
            .backward(&pass, &x, F::of(1.0 - lambda), mu_grad.as_ref().map(|g| g.view()));
        opt.step(&mut state.params, &grads, &mut state.velocity, lr);
        if let Some(gm) = centroid_grad {
            state.centroids.values_mut().scaled_add(-lr, &gm);
        }
        if it.is_multiple_of(500) {
            debug!("iteration {it}: batch L_c {l_c:.5} L_n {l_r:.3}");
        }
        observer.on_record(&record);
        state.loss_history.push(record);
        state.iteration += 1;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, synth_blobs_with_centers};
    use crate::metrics::clustering_accuracy;
    use crate::model::{build_model, ArchitectureSpec};
    use crate::train::pretrain;

    fn setup(seed: u64) -> (Dataset, Vae<f32>, TrainSchedule) {
        let data = synth_blobs(3, 100, 64, 10.0, 1.0, seed).unwrap();
        let mut spec = ArchitectureSpec::mlp(data.shape);
        spec.mlp_dims = vec![64, 32];
        spec.latent_dim = 4;
        let schedule = TrainSchedule {
            batch_size: 32,
            pretrain_iterations: 300,
            max_iterations: 600,
            update_interval: 20,
            seed,
            ..Default::default()
        };
        let mut model = build_model::<f32>(&spec, seed).unwrap();
        pretrain(&mut model, &data, &schedule).unwrap();
        (data, model, schedule)
    }

    fn initial_state(data: &Dataset, model: Vae<f32>, schedule: &TrainSchedule) -> TrainState<f32> {
        let (c, labels) = init_centroids(&model, data, 3, schedule.seed, 5).unwrap();
        TrainState::new(model, c, labels)
    }

    #[test]
    fn init_centroids_recovers_blobs() {
        let (data, model, _) = setup(3);
        let (c, labels) = init_centroids(&model, &data, 3, 0, 10).unwrap();
        assert_eq!(c.k(), 3);
        assert_eq!(
            clustering_accuracy(data.labels.as_ref().unwrap(), &labels).unwrap(),
            1.0
        );
        assert_eq!(init_centroids(&model, &data, 3, 0, 10).unwrap().1, labels);
        assert!(init_centroids(&model, &data, 1, 0, 10).is_err());
        assert!(init_centroids(&model, &data.head(2), 3, 0, 10).is_err());
    }

    #[test]
    fn converges_on_blobs() {
        let (data, model, schedule) = setup(4);
        let state = joint_train(initial_state(&data, model, &schedule), &data, &schedule).unwrap();
        assert!(state.converged);
        assert!(state.last_label_change().unwrap() < schedule.delta);
        let acc = clustering_accuracy(data.labels.as_ref().unwrap(), &state.last_labels).unwrap();
        assert!(acc >= 0.95, "acc {acc}");
        let updates: Vec<&LossRecord> = state.loss_history.iter().filter(|r| r.label_change.is_some()).collect();
        assert!(updates.iter().all(|r| r.iteration % schedule.update_interval == 0));
        assert!(state.loss_history.iter().all(LossRecord::is_finite));
    }

    #[test]
    fn delta_one_stops_at_second_update() {
        let (data, model, mut schedule) = setup(5);
        schedule.delta = 1.0;
        let state = joint_train(initial_state(&data, model, &schedule), &data, &schedule).unwrap();
        assert!(state.converged);
        assert_eq!(state.target_updates, 2);
        assert_eq!(state.iteration, schedule.update_interval + 1);
    }

    #[test]
    fn zero_budget_returns_initial_state() {
        let (data, model, mut schedule) = setup(6);
        schedule.max_iterations = 0;
        let init = initial_state(&data, model, &schedule);
        let out = joint_train(init.clone(), &data, &schedule).unwrap();
        assert!(!out.converged);
        assert_eq!(out.params, init.params);
        assert_eq!(out.centroids, init.centroids);
        assert!(out.loss_history.is_empty());
    }

    #[test]
    fn centroids_fixed_without_clustering_gradient() {
        let (data, model, mut schedule) = setup(7);
        schedule.clustering_gradient = false;
        schedule.max_iterations = 100;
        schedule.delta = 0.0;
        let init = initial_state(&data, model, &schedule);
        let out = joint_train(init.clone(), &data, &schedule).unwrap();
        assert_eq!(out.centroids, init.centroids);
        assert_ne!(out.params, init.params);
    }

    #[test]
    fn deterministic_and_resumable() {
        let (data, model, mut schedule) = setup(8);
        schedule.max_iterations = 90;
        schedule.delta = 0.0;
        let init = initial_state(&data, model, &schedule);
        let full = joint_train(init.clone(), &data, &schedule).unwrap();
        assert_eq!(
            full.loss_history,
            joint_train(init.clone(), &data, &schedule).unwrap().loss_history
        );

        // Stop after the update at 40, then continue.
        let mut first = schedule.clone();
        first.max_iterations = 41;
        let half = joint_train(init, &data, &first).unwrap();
        let resumed = joint_train(half, &data, &schedule).unwrap();
        assert_eq!(resumed.loss_history, full.loss_history);
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.centroids, full.centroids);
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        let (data, centers) = synth_blobs_with_centers(2, 20, 4, 10.0, 0.5, 1).unwrap();
        let z = data.images.mapv(f64::from);
        let far = centers.row(0).mapv(|v| v + 50.0);
        let mut m = Array2::zeros((3, 4));
        m.row_mut(0).assign(&centers.row(0));
        m.row_mut(1).assign(&centers.row(1));
        m.row_mut(2).assign(&far);
        let mut c = Centroids::new(m).unwrap();
        let schedule = TrainSchedule::default();
        let (_, p, labels, reseeded) = target_step(&z, &mut c, &schedule).unwrap();
        assert_eq!(reseeded, vec![2]);
        assert!(hard_counts(&labels, 3).iter().all(|&c| c > 0));
        assert_eq!(p.n(), 40);
    }
}
