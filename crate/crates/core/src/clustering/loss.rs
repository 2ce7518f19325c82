use ndarray::{Array2, ArrayView2};

use super::{Centroids, SoftAssignment, TargetDistribution, PROB_EPS};
use crate::error::{DvcError, Result};

/// `Σ_i Σ_j p_ij ln(p_ij / q_ij)` over raw matrices, with `0 · ln 0 = 0`.
///
/// Both arguments are floored at the same epsilon before the logarithm, so
/// `P == Q` yields exactly zero.
pub fn kl_divergence(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(DvcError::invalid(format!(
            "shape mismatch: P is {:?}, Q is {:?}",
            p.dim(),
            q.dim()
        )));
    }
    let mut total = 0.0;
    for (&pij, &qij) in p.iter().zip(q.iter()) {
        if !(pij.is_finite() && qij.is_finite()) {
            return Err(DvcError::domain("non-finite probability"));
        }
        if pij > 0.0 {
            total += pij * (pij.max(PROB_EPS).ln() - qij.max(PROB_EPS).ln());
        }
    }
    Ok(total)
}

/// Clustering loss `KL(P ‖ Q)` summed over samples.
///
/// Both arguments are row-stochastic, so the true value is non-negative; the
/// result is clamped at zero to absorb rounding when `P ≈ Q`.
pub fn kl_clustering_loss(p: &TargetDistribution, q: &SoftAssignment) -> Result<f64> {
    kl_divergence(p.view(), q.view()).map(|kl| kl.max(0.0))
}

/// Gradients of `Σ_i Σ_j p_ij ln(p_ij / q_ij)` with respect to the points and
/// the centroids, holding `P` constant.
///
/// With `w_ij = (1 + ‖z_i − m_j‖²/α)^-1` and `s_i = Σ_j p_ij`:
///
/// ```text
/// ∂L/∂z_i = (α+1)/α · Σ_j w_ij (p_ij − s_i q_ij)(z_i − m_j)
/// ∂L/∂m_j = −(α+1)/α · Σ_i w_ij (p_ij − s_i q_ij)(z_i − m_j)
/// ```
pub fn kl_gradients(
    q: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    m: ArrayView2<'_, f64>,
    alpha: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n, k) = q.dim();
    if p.dim() != (n, k) || z.nrows() != n || m.nrows() != k || z.ncols() != m.ncols() {
        return Err(DvcError::invalid(format!(
            "inconsistent shapes: Q {:?}, P {:?}, Z {:?}, M {:?}",
            q.dim(),
            p.dim(),
            z.dim(),
            m.dim()
        )));
    }
    if !(alpha > 0.0) {
        return Err(DvcError::invalid("alpha must be positive"));
    }
    let scale = (alpha + 1.0) / alpha;
    let mut gz = Array2::<f64>::zeros(z.raw_dim());
    let mut gm = Array2::<f64>::zeros(m.raw_dim());
    let mut diff = vec![0.0; z.ncols()];
    for i in 0..n {
        let zi = z.row(i);
        let s_i: f64 = p.row(i).sum();
        for j in 0..k {
            let mj = m.row(j);
            let mut d2 = 0.0;
            for ((d, &a), &b) in diff.iter_mut().zip(zi).zip(mj) {
                *d = a - b;
                d2 += *d * *d;
            }
            let coef = scale * (p[[i, j]] - s_i * q[[i, j]]) / (1.0 + d2 / alpha);
            for (c, &d) in diff.iter().enumerate() {
                gz[[i, c]] += coef * d;
                gm[[j, c]] -= coef * d;
            }
        }
    }
    Ok((gz, gm))
}

/// Typed wrapper over [`kl_gradients`].
pub fn cluster_loss_gradients(
    q: &SoftAssignment,
    p: &TargetDistribution,
    z: ArrayView2<'_, f64>,
    m: &Centroids,
) -> Result<(Array2<f64>, Array2<f64>)> {
    kl_gradients(q.view(), p.view(), z, m.view(), q.alpha())
}
