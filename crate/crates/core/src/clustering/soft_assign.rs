use ndarray::{Array2, ArrayView2};

use super::{ensure_finite, Centroids, SoftAssignment};
use crate::error::{DvcError, Result};

/// Student's-t kernel similarities, normalized per row.
///
/// `q_ij ∝ (1 + ‖z_i − m_j‖² / α)^(−(α+1)/2)`. The kernel is evaluated in the
/// log domain so that large distances or large `α` never produce `0/0`.
pub fn student_t_assign(z: ArrayView2<'_, f64>, m: ArrayView2<'_, f64>, alpha: f64) -> Result<Array2<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DvcError::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if z.ncols() != m.ncols() {
        return Err(DvcError::invalid(format!(
            "latent dimension mismatch: points have {}, centroids have {}",
            z.ncols(),
            m.ncols()
        )));
    }
    if m.nrows() < 2 {
        return Err(DvcError::invalid("soft assignment needs K >= 2"));
    }
    if z.nrows() == 0 {
        return Err(DvcError::invalid("soft assignment needs at least one point"));
    }
    ensure_finite(&z, "embedded points")?;
    ensure_finite(&m, "centroids")?;

    let exponent = -(alpha + 1.0) / 2.0;
    let k = m.nrows();
    let mut q = Array2::<f64>::zeros((z.nrows(), k));
    let mut log_kernel = vec![0.0; k];
    for (zi, mut qi) in z.outer_iter().zip(q.outer_iter_mut()) {
        let mut max_log = f64::NEG_INFINITY;
        for (j, mj) in m.outer_iter().enumerate() {
            let d2: f64 = zi.iter().zip(mj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            let lk = exponent * (d2 / alpha).ln_1p();
            log_kernel[j] = lk;
            max_log = max_log.max(lk);
        }
        if !max_log.is_finite() {
            return Err(DvcError::domain("soft assignment kernel overflowed"));
        }
        let mut total = 0.0;
        for (dst, &lk) in qi.iter_mut().zip(&log_kernel) {
            *dst = (lk - max_log).exp();
            total += *dst;
        }
        for v in qi.iter_mut() {
            *v = (*v / total).max(f64::MIN_POSITIVE);
        }
    }
    Ok(q)
}

/// Soft assignment `Q` of every embedded point to every centroid.
pub fn soft_assign(z: ArrayView2<'_, f64>, centroids: &Centroids, alpha: f64) -> Result<SoftAssignment> {
    let q = student_t_assign(z, centroids.view(), alpha)?;
    Ok(SoftAssignment::from_parts_unchecked(q, alpha))
}
