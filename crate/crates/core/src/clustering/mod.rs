//! Soft assignment, self-labeling targets, the KL clustering loss and its
//! gradients, hard label assignment and K-means initialization.
//!
//! Everything here is a pure function over `f64` matrices: rows index samples,
//! columns index clusters (for `Q`/`P`) or latent dimensions (for `Z`/`M`).

mod kmeans;
mod labels;
mod loss;
mod soft_assign;
mod target;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{DvcError, Result};

pub use kmeans::{kmeans, KMeansResult, DEFAULT_RESTARTS};
pub use labels::{assign_labels, hard_counts, label_change_fraction};
pub use loss::{cluster_loss_gradients, kl_clustering_loss, kl_divergence, kl_gradients};
pub use soft_assign::{soft_assign, student_t_assign};
pub use target::{
    cluster_frequencies, dec_baseline_target, frequency_penalty, modified_target, target_distribution, ClusterStats,
    DEFAULT_GAMMA,
};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-8;

/// Row-sum tolerance for row-stochastic matrices.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[inline]
pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_row_stochastic(values: &ArrayView2<'_, f64>, what: &str, allow_zero: bool) -> Result<()> {
    for (i, row) in values.outer_iter().enumerate() {
        let mut sum = 0.0;
        for &v in row {
            let ok = if allow_zero {
                (0.0..=1.0).contains(&v)
            } else {
                v > 0.0 && v <= 1.0
            };
            if !ok {
                return Err(DvcError::domain(format!("{what} entry {v} in row {i} out of range")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(DvcError::domain(format!("{what} row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// `Q`: Student's-t similarities between embedded points and centroids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftAssignment {
    values: Array2<f64>,
    alpha: f64,
}

impl SoftAssignment {
    /// Wraps an existing matrix, checking the row-stochastic invariants.
    pub fn from_matrix(values: Array2<f64>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(DvcError::invalid(format!("alpha must be positive, got {alpha}")));
        }
        if values.nrows() == 0 || values.ncols() < 2 {
            return Err(DvcError::invalid(format!(
                "soft assignment needs N >= 1 and K >= 2, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        check_row_stochastic(&values.view(), "soft assignment", false)?;
        Ok(Self { values, alpha })
    }

    pub(crate) fn from_parts_unchecked(values: Array2<f64>, alpha: f64) -> Self {
        Self { values, alpha }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetVariant {
    /// `q^2 / u` renormalized per row.
    DecBaseline,
    /// `q^2 / (u + v)` renormalized per row, with the frequency penalty `v`.
    DvcModified,
}

impl std::str::FromStr for TargetVariant {
    type Err = DvcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dec_baseline" | "dec" => Ok(Self::DecBaseline),
            "dvc_modified" | "dvc" => Ok(Self::DvcModified),
            other => Err(DvcError::invalid(format!("unknown target variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for TargetVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DecBaseline => "dec_baseline",
            Self::DvcModified => "dvc_modified",
        })
    }
}

/// `P`: the auxiliary self-training target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    values: Array2<f64>,
    variant: TargetVariant,
}

impl TargetDistribution {
    pub fn from_matrix(values: Array2<f64>, variant: TargetVariant) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() < 2 {
            return Err(DvcError::invalid("target distribution needs N >= 1 and K >= 2"));
        }
        check_row_stochastic(&values.view(), "target distribution", true)?;
        Ok(Self { values, variant })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn variant(&self) -> TargetVariant {
        self.variant
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }
}

/// Cluster centers `m_1..m_K` in latent space, one per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroids(Array2<f64>);

impl Centroids {
    /// Requires `K >= 2`, finite entries and pairwise-distinct rows.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let k = values.nrows();
        if k < 2 {
            return Err(DvcError::invalid(format!("need at least 2 centroids, got {k}")));
        }
        if values.ncols() == 0 {
            return Err(DvcError::invalid("centroids have zero dimension"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DvcError::domain("non-finite centroid coordinate"));
        }
        for a in 0..k {
            for b in (a + 1)..k {
                if values.row(a) == values.row(b) {
                    return Err(DvcError::invalid(format!("centroids {a} and {b} coincide")));
                }
            }
        }
        Ok(Self(values))
    }

    pub fn k(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    /// Mutable access for optimizers. Callers keep the rows distinct.
    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

pub(crate) fn ensure_finite(values: &ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DvcError::domain(format!("{what} contains non-finite values")))
    }
}

pub(crate) fn column_sums(values: &ArrayView2<'_, f64>) -> Array1<f64> {
    values.sum_axis(ndarray::Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn centroids_reject_duplicates_and_singletons() {
        assert!(Centroids::new(array![[0.0, 1.0]]).is_err());
        assert!(Centroids::new(array![[0.0, 1.0], [0.0, 1.0]]).is_err());
        assert!(Centroids::new(array![[0.0, 1.0], [0.0, 1.5]]).is_ok());
        assert!(Centroids::new(array![[0.0, f64::NAN], [0.0, 1.5]]).is_err());
    }

    #[test]
    fn soft_assignment_validation() {
        assert!(SoftAssignment::from_matrix(array![[0.5, 0.5]], 1.0).is_ok());
        assert!(SoftAssignment::from_matrix(array![[0.5, 0.6]], 1.0).is_err());
        assert!(SoftAssignment::from_matrix(array![[1.0, 0.0]], 1.0).is_err());
        assert!(SoftAssignment::from_matrix(array![[1.0]], 1.0).is_err());
        assert!(SoftAssignment::from_matrix(array![[0.5, 0.5]], 0.0).is_err());
    }

    #[test]
    fn target_variant_parses() {
        assert_eq!(
            "dvc_modified".parse::<TargetVariant>().unwrap(),
            TargetVariant::DvcModified
        );
        assert_eq!("dec".parse::<TargetVariant>().unwrap(), TargetVariant::DecBaseline);
        assert!("other".parse::<TargetVariant>().is_err());
    }
}
