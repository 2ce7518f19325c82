use ndarray::ArrayView2;

use crate::error::{DvcError, Result};

/// Minimum-cost perfect matching on a square matrix (Kuhn–Munkres with
/// potentials, O(K³)). Returns `perm` with row `i` assigned to column
/// `perm[i]`.
pub fn hungarian_match(cost: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(DvcError::invalid(format!("cost matrix must be square, got {n}x{m}")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(DvcError::domain("non-finite cost"));
    }
    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[row_of[j] - 1] = j - 1;
    }
    Ok(perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cost_of(cost: &Array2<f64>, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum()
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..k {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn identity_and_reversal() {
        let eye = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 0.0 } else { 1.0 });
        assert_eq!(hungarian_match(eye.view()).unwrap(), vec![0, 1, 2, 3]);
        let anti = Array2::from_shape_fn((4, 4), |(i, j)| if i + j == 3 { 0.0 } else { 1.0 });
        assert_eq!(hungarian_match(anti.view()).unwrap(), vec![3, 2, 1, 0]);
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let perms = permutations(5);
        assert_eq!(perms.len(), 120);
        for _ in 0..100 {
            let cost = Array2::from_shape_fn((5, 5), |_| rng.random_range(-3.0..10.0));
            let found = hungarian_match(cost.view()).unwrap();
            let best = perms.iter().map(|p| cost_of(&cost, p)).fold(f64::INFINITY, f64::min);
            assert!((cost_of(&cost, &found) - best).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian_match(Array2::<f64>::zeros((2, 3)).view()).is_err());
        let mut c = Array2::<f64>::zeros((2, 2));
        c[(0, 1)] = f64::NAN;
        assert!(hungarian_match(c.view()).is_err());
        assert_eq!(
            hungarian_match(Array2::<f64>::zeros((0, 0)).view()).unwrap(),
            Vec::<usize>::new()
        );
        assert_eq!(hungarian_match(Array2::<f64>::zeros((1, 1)).view()).unwrap(), vec![0]);
    }
}
