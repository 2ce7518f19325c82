use ndarray::ArrayView2;

use super::SoftAssignment;
use crate::error::{DvcError, Result};

/// Row-wise argmax; ties go to the lowest cluster index.
pub fn assign_labels(q: &SoftAssignment) -> Vec<usize> {
    argmax_rows(q.view())
}

pub(crate) fn argmax_rows(values: ArrayView2<'_, f64>) -> Vec<usize> {
    values
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Number of samples carrying each label in `0..k`.
pub fn hard_counts(labels: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &l in labels {
        if l < k {
            counts[l] += 1;
        }
    }
    counts
}

/// Fraction of positions whose label differs between two labelings.
pub fn label_change_fraction(prev: &[usize], curr: &[usize]) -> Result<f64> {
    if prev.len() != curr.len() {
        return Err(DvcError::invalid(format!(
            "label vectors differ in length: {} vs {}",
            prev.len(),
            curr.len()
        )));
    }
    if prev.is_empty() {
        return Ok(0.0);
    }
    let changed = prev.iter().zip(curr).filter(|(a, b)| a != b).count();
    Ok(changed as f64 / prev.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn argmax_and_ties() {
        let q = SoftAssignment::from_matrix(array![[0.2, 0.5, 0.3]], 1.0).unwrap();
        assert_eq!(assign_labels(&q), vec![1]);
        let q = SoftAssignment::from_matrix(array![[0.5, 0.5]], 1.0).unwrap();
        assert_eq!(assign_labels(&q), vec![0]);
        let q = SoftAssignment::from_matrix(array![[0.9, 0.1], [0.1, 0.9]], 1.0).unwrap();
        assert_eq!(assign_labels(&q), vec![0, 1]);
    }

    #[test]
    fn change_fraction() {
        assert_eq!(label_change_fraction(&[0, 1, 2], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(label_change_fraction(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(label_change_fraction(&[0, 0, 1, 1], &[0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(
            label_change_fraction(&[0], &[0, 1]),
            Err(DvcError::InvalidArgument(_))
        ));
    }

    #[test]
    fn counts() {
        assert_eq!(hard_counts(&[0, 2, 2, 1, 2], 4), vec![1, 1, 3, 0]);
    }
}
