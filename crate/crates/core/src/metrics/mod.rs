//! External clustering metrics: accuracy under optimal matching, NMI and ARI.

mod hungarian;

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DvcError, Result};

pub use hungarian::hungarian_match;

/// Counts of (true class, predicted cluster) pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: Array2<u64>,
    n: u64,
}

impl ContingencyTable {
    /// Rows are true classes, columns predicted clusters.
    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    fn row_sums(&self) -> Vec<u64> {
        self.counts.rows().into_iter().map(|r| r.sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        self.counts.columns().into_iter().map(|c| c.sum()).collect()
    }
}

fn check_lengths(y_true: &[usize], y_pred: &[usize]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(DvcError::invalid(format!(
            "label length mismatch: {} true vs {} predicted",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(DvcError::invalid("no labels"));
    }
    Ok(())
}

/// Table of size `(max y_true + 1) × (max y_pred + 1)`.
pub fn contingency(y_true: &[usize], y_pred: &[usize]) -> Result<ContingencyTable> {
    check_lengths(y_true, y_pred)?;
    let rows = y_true.iter().max().map_or(0, |&m| m + 1);
    let cols = y_pred.iter().max().map_or(0, |&m| m + 1);
    let mut counts = Array2::<u64>::zeros((rows, cols));
    for (&t, &p) in y_true.iter().zip(y_pred) {
        counts[(t, p)] += 1;
    }
    Ok(ContingencyTable {
        counts,
        n: y_true.len() as u64,
    })
}

/// Fraction of samples correctly labeled under the best one-to-one mapping
/// of clusters to classes. Unequal label ranges are padded with empty
/// classes or clusters.
pub fn clustering_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let table = contingency(y_true, y_pred)?;
    let (r, c) = table.counts.dim();
    let size = r.max(c);
    let max = *table.counts.iter().max().unwrap_or(&0) as f64;
    let cost = Array2::from_shape_fn((size, size), |(i, j)| {
        let count = if i < r && j < c { table.counts[(i, j)] } else { 0 };
        max - count as f64
    });
    let perm = hungarian_match(cost.view())?;
    let matched: u64 = perm
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < r && j < c)
        .map(|(i, &j)| table.counts[(i, j)])
        .sum();
    Ok(matched as f64 / table.n as f64)
}

fn entropy(sums: &[u64], n: f64) -> f64 {
    sums.iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(Y; C) / sqrt(H(Y) H(C))` in nats. Two single-block partitions score 1;
/// otherwise a zero entropy on either side scores 0.
pub fn nmi(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let table = contingency(y_true, y_pred)?;
    let n = table.n as f64;
    let (rows, cols) = (table.row_sums(), table.col_sums());
    let (h_true, h_pred) = (entropy(&rows, n), entropy(&cols, n));
    if h_true == 0.0 && h_pred == 0.0 {
        return Ok(1.0);
    }
    if h_true == 0.0 || h_pred == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for ((i, j), &c) in table.counts.indexed_iter() {
        if c > 0 {
            let c = c as f64;
            mi += c / n * (c * n / (rows[i] as f64 * cols[j] as f64)).ln();
        }
    }
    Ok((mi / (h_true * h_pred).sqrt()).clamp(0.0, 1.0))
}

fn pairs(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index by pair counting. Not clamped: values below zero mean
/// worse-than-chance agreement.
pub fn ari(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let table = contingency(y_true, y_pred)?;
    let index: f64 = table.counts.iter().map(|&c| pairs(c)).sum();
    let sum_rows: f64 = table.row_sums().into_iter().map(pairs).sum();
    let sum_cols: f64 = table.col_sums().into_iter().map(pairs).sum();
    let total = pairs(table.n);
    let expected = if total > 0.0 { sum_rows * sum_cols / total } else { 0.0 };
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    // A zero denominator only occurs when both partitions are trivial and equal.
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// Serialized as the evaluation artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub n: usize,
    pub k_pred: usize,
    pub k_true: usize,
}

impl MetricsReport {
    pub fn evaluate(y_true: &[usize], y_pred: &[usize]) -> Result<Self> {
        Ok(Self {
            acc: clustering_accuracy(y_true, y_pred)?,
            nmi: nmi(y_true, y_pred)?,
            ari: ari(y_true, y_pred)?,
            n: y_true.len(),
            k_pred: y_pred.iter().collect::<BTreeSet<_>>().len(),
            k_true: y_true.iter().collect::<BTreeSet<_>>().len(),
        })
    }
}
