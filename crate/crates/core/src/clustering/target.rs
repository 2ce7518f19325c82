use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{assign_labels, clamp_prob, column_sums, hard_counts, SoftAssignment, TargetDistribution, TargetVariant};
use crate::error::{DvcError, Result};

/// Relaxation exponent on `(1 - q)` in the frequency penalty.
pub const DEFAULT_GAMMA: f64 = 2.0;

/// Soft cluster frequencies `u_j = Σ_i q_ij`.
pub fn cluster_frequencies(q: &SoftAssignment) -> Array1<f64> {
    column_sums(&q.view())
}

/// Per-cluster frequency penalty
/// `v_j = Σ_i sqrt( (Σ_k N_k / N_j) · (1 − q_ij)^γ · (−ln q_ij) )`.
///
/// `n_hard` holds hard cluster counts; each `N_j` is floored at 1 so empty
/// clusters receive the largest weight instead of a division by zero.
pub fn frequency_penalty(q: &SoftAssignment, n_hard: &[usize], gamma: f64) -> Result<Array1<f64>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(DvcError::invalid(format!("gamma must be non-negative, got {gamma}")));
    }
    if n_hard.len() != q.k() {
        return Err(DvcError::invalid(format!(
            "hard counts have length {}, expected K = {}",
            n_hard.len(),
            q.k()
        )));
    }
    let total: usize = n_hard.iter().sum();
    let total = total.max(1) as f64;
    let mut v = Array1::<f64>::zeros(q.k());
    for row in q.values().outer_iter() {
        for (j, &qij) in row.iter().enumerate() {
            let p = clamp_prob(qij);
            if !(p > 0.0 && p < 1.0) {
                return Err(DvcError::domain(format!("q entry {qij} outside (0, 1)")));
            }
            let ratio = total / n_hard[j].max(1) as f64;
            v[j] += (ratio * (1.0 - p).powf(gamma) * -p.ln()).sqrt();
        }
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(DvcError::domain("frequency penalty is not finite"));
    }
    Ok(v)
}

/// Statistics feeding the modified target: soft frequencies `u`, penalties
/// `v` and the hard counts they were derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    /// Raw argmax counts (sum to `N`); flooring at 1 happens inside the penalty.
    pub n_hard: Vec<usize>,
    pub gamma: f64,
}

impl ClusterStats {
    /// Hard counts come from the argmax labels of `q` itself.
    pub fn from_assignment(q: &SoftAssignment, gamma: f64) -> Result<Self> {
        let labels = assign_labels(q);
        let n_hard = hard_counts(&labels, q.k());
        Self::with_counts(q, n_hard, gamma)
    }

    pub fn with_counts(q: &SoftAssignment, n_hard: Vec<usize>, gamma: f64) -> Result<Self> {
        let v = frequency_penalty(q, &n_hard, gamma)?;
        Ok(Self {
            u: cluster_frequencies(q),
            v,
            n_hard,
            gamma,
        })
    }
}

fn sharpen_rows(q: ArrayView2<'_, f64>, denom: &Array1<f64>) -> Result<Array2<f64>> {
    let mut p = Array2::<f64>::zeros(q.raw_dim());
    for (i, (qi, mut pi)) in q.outer_iter().zip(p.outer_iter_mut()).enumerate() {
        let mut total = 0.0;
        for ((dst, &qij), &d) in pi.iter_mut().zip(qi).zip(denom) {
            *dst = qij * qij / d;
            total += *dst;
        }
        if !(total > 0.0 && total.is_finite()) {
            return Err(DvcError::domain(format!("target row {i} vanished after squaring")));
        }
        pi.mapv_inplace(|x| x / total);
    }
    Ok(p)
}

/// Frequency-normalized target `p_ij ∝ q_ij² / (u_j + v_j)`, rows summing to 1.
pub fn modified_target(q: &SoftAssignment, stats: &ClusterStats) -> Result<TargetDistribution> {
    if stats.u.len() != q.k() || stats.v.len() != q.k() {
        return Err(DvcError::invalid("cluster statistics do not match K"));
    }
    let denom = &stats.u + &stats.v;
    if denom.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(DvcError::domain("u_j + v_j must be positive"));
    }
    let p = sharpen_rows(q.view(), &denom)?;
    TargetDistribution::from_matrix(p, TargetVariant::DvcModified)
}

/// Standard self-training target `p_ij ∝ q_ij² / u_j`.
pub fn dec_baseline_target(q: &SoftAssignment) -> Result<TargetDistribution> {
    let u = cluster_frequencies(q);
    let p = sharpen_rows(q.view(), &u)?;
    TargetDistribution::from_matrix(p, TargetVariant::DecBaseline)
}

/// Builds the requested target variant. Also returns the statistics used,
/// which for the baseline carry `v = 0`.
pub fn target_distribution(
    q: &SoftAssignment,
    variant: TargetVariant,
    gamma: f64,
) -> Result<(TargetDistribution, ClusterStats)> {
    match variant {
        TargetVariant::DvcModified => {
            let stats = ClusterStats::from_assignment(q, gamma)?;
            Ok((modified_target(q, &stats)?, stats))
        }
        TargetVariant::DecBaseline => {
            let labels = assign_labels(q);
            let stats = ClusterStats {
                u: cluster_frequencies(q),
                v: Array1::zeros(q.k()),
                n_hard: hard_counts(&labels, q.k()),
                gamma,
            };
            Ok((dec_baseline_target(q)?, stats))
        }
    }
}
