//! Two-phase optimization: VAE pretraining, K-means centroid initialization,
//! then joint training with interval-gated target updates until the fraction
//! of changed pseudo-labels drops below `delta`.

mod history;
mod joint;
mod optim;
mod pretrain;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clustering::{Centroids, TargetDistribution, TargetVariant, DEFAULT_GAMMA, DEFAULT_RESTARTS};
use crate::error::{DvcError, Result};
use crate::model::Vae;
use crate::real::Real;

pub use history::{write_loss_csv, LossRecord, LOSS_CSV_HEADER};
pub use joint::{embed_all, init_centroids, joint_train, joint_train_observed, TargetUpdate};
pub use optim::Sgd;
pub use pretrain::{pretrain, pretrain_observed};

/// How the autoencoder is pretrained before clustering.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Minimize the full network loss over all layers at once.
    #[default]
    EndToEnd,
    /// Greedy denoising pretraining of each dense encoder/decoder pair
    /// (dense architecture only), followed by end-to-end fine-tuning.
    LayerWise,
}

impl FromStr for PretrainMode {
    type Err = DvcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end_to_end" | "end-to-end" => Ok(Self::EndToEnd),
            "layer_wise" | "layer-wise" | "layerwise" => Ok(Self::LayerWise),
            other => Err(DvcError::invalid(format!("unknown pretrain mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for PretrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::EndToEnd => "end_to_end",
            Self::LayerWise => "layer_wise",
        })
    }
}

/// Hyperparameters for both phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    /// Weight of the clustering loss; the network loss gets `1 − lambda`.
    pub lambda: f64,
    /// Stop once the fraction of changed labels between two consecutive
    /// target updates is below this.
    pub delta: f64,
    pub update_interval: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// Joint-phase iteration budget.
    pub max_iterations: usize,
    pub pretrain_iterations: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    /// Student's-t degrees of freedom.
    pub alpha: f64,
    pub gamma: f64,
    pub target: TargetVariant,
    pub kmeans_restarts: usize,
    pub pretrain_mode: PretrainMode,
    /// Iterations per layer pair for layer-wise pretraining.
    pub layerwise_iterations: usize,
    pub dropout: f64,
    /// When false the clustering term contributes nothing to any gradient
    /// (ablation); centroids then stay fixed.
    pub clustering_gradient: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            delta: 0.001,
            update_interval: 100,
            batch_size: 256,
            base_lr: 0.01,
            lr_decay_every: 20_000,
            lr_decay_factor: 10.0,
            max_iterations: 20_000,
            pretrain_iterations: 3_000,
            seed: 0,
            weight_decay: 0.0,
            momentum: 0.0,
            alpha: 1.0,
            gamma: DEFAULT_GAMMA,
            target: TargetVariant::DvcModified,
            kmeans_restarts: DEFAULT_RESTARTS,
            pretrain_mode: PretrainMode::EndToEnd,
            layerwise_iterations: 1_000,
            dropout: 0.2,
            clustering_gradient: true,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(DvcError::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(DvcError::invalid(format!(
                "lambda must lie in (0, 1), got {}",
                self.lambda
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(DvcError::invalid(format!(
                "delta must be non-negative, got {}",
                self.delta
            )));
        }
        positive("base_lr", self.base_lr)?;
        positive("lr_decay_factor", self.lr_decay_factor)?;
        positive("alpha", self.alpha)?;
        if self.update_interval == 0 || self.batch_size == 0 || self.lr_decay_every == 0 || self.kmeans_restarts == 0 {
            return Err(DvcError::invalid(
                "update_interval, batch_size, lr_decay_every and kmeans_restarts must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DvcError::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(DvcError::invalid("weight_decay must be non-negative"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(DvcError::invalid("gamma must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DvcError::invalid(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// `base_lr / decay_factor^⌊iteration / decay_every⌋`.
pub fn lr_at(iteration: usize, schedule: &TrainSchedule) -> f64 {
    let decays = (iteration / schedule.lr_decay_every.max(1)) as i32;
    schedule.base_lr / schedule.lr_decay_factor.powi(decays)
}

/// `λ·l_c + (1 − λ)·l_r`.
pub fn total_loss(l_c: f64, l_r: f64, lambda: f64) -> f64 {
    lambda * l_c + (1.0 - lambda) * l_r
}

/// Everything the joint phase threads between iterations.
#[derive(Clone, Debug)]
pub struct TrainState<F> {
    /// Next joint iteration to execute.
    pub iteration: usize,
    pub centroids: Centroids,
    pub params: Vae<F>,
    pub last_target: Option<TargetDistribution>,
    /// K-means labels before the first target update.
    pub last_labels: Vec<usize>,
    pub converged: bool,
    pub target_updates: usize,
    pub loss_history: Vec<LossRecord>,
    /// Momentum buffer; `None` for plain SGD.
    pub velocity: Option<Vae<F>>,
}

impl<F: Real> TrainState<F> {
    pub fn new(params: Vae<F>, centroids: Centroids, labels: Vec<usize>) -> Self {
        Self {
            iteration: 0,
            centroids,
            params,
            last_target: None,
            last_labels: labels,
            converged: false,
            target_updates: 0,
            loss_history: Vec::new(),
            velocity: None,
        }
    }

    /// The most recent label-change fraction, if any target update happened.
    pub fn last_label_change(&self) -> Option<f64> {
        self.loss_history.iter().rev().find_map(|r| r.label_change)
    }
}

/// Hooks for progress, checkpoints and failure dumps. All methods default to
/// doing nothing.
pub trait TrainObserver<F> {
    fn on_record(&mut self, _record: &LossRecord) {}
    /// Called after each target update; `state.iteration` is the next
    /// iteration to run, so a checkpoint taken here resumes exactly.
    fn on_target_update(&mut self, _state: &TrainState<F>, _update: &TargetUpdate) -> Result<()> {
        Ok(())
    }
    /// Called with the offending model before a non-finite loss aborts training.
    fn on_failure(&mut self, _params: &Vae<F>, _error: &DvcError) {}
}

/// Observer that does nothing.
pub struct NoopObserver;

impl<F> TrainObserver<F> for NoopObserver {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_steps() {
        let s = TrainSchedule::default();
        assert_eq!(lr_at(0, &s), 0.01);
        assert_eq!(lr_at(19_999, &s), 0.01);
        assert_eq!(lr_at(20_000, &s), 0.001);
        assert_eq!(lr_at(45_000, &s), 0.0001);
    }

    #[test]
    fn total_loss_is_convex_combination() {
        assert!((total_loss(1.0, 2.0, 0.1) - 1.9).abs() < 1e-15);
        let t = total_loss(5.0, 3.0, 0.001);
        assert!((t - 3.0).abs() / 3.0 < 1e-3);
        for &(a, b, l) in &[(0.3, 7.0, 0.5), (9.0, 1.0, 0.9), (2.0, 2.0, 0.1)] {
            let t = total_loss(a, b, l);
            assert!(t >= f64::min(a, b) - 1e-12 && t <= f64::max(a, b) + 1e-12);
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainSchedule::default().validate().is_ok());
        for bad in [
            TrainSchedule {
                lambda: 0.0,
                ..Default::default()
            },
            TrainSchedule {
                lambda: 1.0,
                ..Default::default()
            },
            TrainSchedule {
                update_interval: 0,
                ..Default::default()
            },
            TrainSchedule {
                base_lr: -1.0,
                ..Default::default()
            },
            TrainSchedule {
                momentum: 1.0,
                ..Default::default()
            },
            TrainSchedule {
                dropout: 1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn pretrain_mode_parses() {
        assert_eq!("end_to_end".parse::<PretrainMode>().unwrap(), PretrainMode::EndToEnd);
        assert_eq!("layer-wise".parse::<PretrainMode>().unwrap(), PretrainMode::LayerWise);
        assert!("greedy".parse::<PretrainMode>().is_err());
    }
}
