//! Deep variational clustering.
//!
//! A variational autoencoder is pretrained on unlabeled images, its latent
//! means are clustered with K-means, and training then continues on a convex
//! combination of the ELBO and `KL(P ‖ Q)`, where `Q` is a Student's-t soft
//! assignment of latent means to learnable centroids and `P` is a sharpened,
//! frequency-normalized target recomputed every `update_interval` steps.
//! Training stops once the fraction of changed pseudo-labels between two
//! consecutive target updates falls below `delta`.
//!
//! Modules:
//! - [`clustering`]: soft assignment, targets, clustering loss and gradients,
//!   labels, K-means.
//! - [`model`]: the encoder/decoder pair and ELBO terms.
//! - [`train`]: pretraining, joint training, schedules, checkpoints.
//! - [`metrics`]: ACC with optimal matching, NMI, ARI.
//! - [`data`]: IDX files, image folders, synthetic blobs, batching.

pub mod checkpoint;
pub mod clustering;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod real;
pub mod rng;
pub mod train;

pub use clustering::{Centroids, ClusterStats, SoftAssignment, TargetDistribution, TargetVariant};
pub use data::{Dataset, ImageBatch, ImageShape};
pub use error::{DvcError, Result};
pub use model::{build_model, ArchitectureSpec, EncoderOutput, ModelParameters, Vae, Variant};
pub use real::Real;
pub use train::{TrainSchedule, TrainState};
