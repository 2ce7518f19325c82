use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use super::{ensure_finite, Centroids};
use crate::error::{DvcError, Result};
use crate::rng::{derive_rng, STREAM_KMEANS};

pub const DEFAULT_RESTARTS: usize = 20;
const MAX_LLOYD_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Centroids,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub wcss: f64,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with D²-weighted seeding, best of `restarts` runs by WCSS.
///
/// Each restart draws from its own stream derived from `seed`, so the result
/// is a pure function of the arguments. A cluster that empties during Lloyd
/// iterations is re-seeded at the point farthest from its assigned centroid.
pub fn kmeans(z: ArrayView2<'_, f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let n = z.nrows();
    if k < 2 {
        return Err(DvcError::invalid(format!("K must be at least 2, got {k}")));
    }
    if n < k {
        return Err(DvcError::invalid(format!("need at least K = {k} points, got {n}")));
    }
    if restarts == 0 {
        return Err(DvcError::invalid("restarts must be at least 1"));
    }
    if z.ncols() == 0 {
        return Err(DvcError::invalid("points have zero dimension"));
    }
    ensure_finite(&z, "k-means input")?;
    if count_distinct_up_to(z, k) < k {
        return Err(DvcError::invalid(format!("fewer than K = {k} distinct points")));
    }

    let norms: Array1<f64> = z.outer_iter().map(|r| r.dot(&r)).collect();
    let mut best: Option<(Array2<f64>, Vec<usize>, f64)> = None;
    for restart in 0..restarts {
        let mut rng = derive_rng(seed, &[STREAM_KMEANS, restart as u64]);
        let init = plus_plus_seed(z, k, &mut rng);
        let (centers, labels, wcss) = lloyd(z, &norms, init);
        if best.as_ref().is_none_or(|(_, _, b)| wcss < *b) {
            best = Some((centers, labels, wcss));
        }
    }
    let (centers, labels, wcss) = best.expect("at least one restart");
    Ok(KMeansResult {
        centroids: Centroids::new(centers)?,
        labels,
        wcss,
    })
}

fn count_distinct_up_to(z: ArrayView2<'_, f64>, limit: usize) -> usize {
    let mut seen: Vec<usize> = Vec::with_capacity(limit);
    for i in 0..z.nrows() {
        if !seen.iter().any(|&s| z.row(s) == z.row(i)) {
            seen.push(i);
            if seen.len() >= limit {
                break;
            }
        }
    }
    seen.len()
}

fn plus_plus_seed(z: ArrayView2<'_, f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = z.nrows();
    let mut centers = Array2::<f64>::zeros((k, z.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&z.row(first));
    let mut closest: Vec<f64> = z.outer_iter().map(|p| sq_dist(p, z.row(first))).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in closest.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc >= target {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` a hair short of `target`.
            chosen.unwrap_or_else(|| closest.iter().rposition(|&d| d > 0.0).expect("positive mass"))
        } else {
            0
        };
        centers.row_mut(c).assign(&z.row(pick));
        for (d, p) in closest.iter_mut().zip(z.outer_iter()) {
            *d = d.min(sq_dist(p, z.row(pick)));
        }
    }
    centers
}

/// Nearest center per point using `‖z‖² − 2 z·m + ‖m‖²`; ties go to the lowest index.
fn assign(z: ArrayView2<'_, f64>, norms: &Array1<f64>, centers: &Array2<f64>, labels: &mut [usize]) -> bool {
    let cross = z.dot(&centers.t());
    let center_norms: Vec<f64> = centers.outer_iter().map(|r| r.dot(&r)).collect();
    let mut changed = false;
    for (i, row) in cross.outer_iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, &c) in row.iter().enumerate() {
            let d = norms[i] - 2.0 * c + center_norms[j];
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        if labels[i] != best {
            labels[i] = best;
            changed = true;
        }
    }
    changed
}

fn lloyd(z: ArrayView2<'_, f64>, norms: &Array1<f64>, mut centers: Array2<f64>) -> (Array2<f64>, Vec<usize>, f64) {
    let (n, k) = (z.nrows(), centers.nrows());
    let mut labels = vec![usize::MAX; n];
    for iter in 0..MAX_LLOYD_ITERS {
        let changed = assign(z, norms, &centers, &mut labels);
        if !changed && iter > 0 {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &z.row(i));
            counts[l] += 1;
        }
        let mut reseeded: Vec<usize> = Vec::new();
        for j in 0..k {
            if counts[j] > 0 {
                let mean = &sums.row(j) / counts[j] as f64;
                centers.row_mut(j).assign(&mean);
            } else {
                // Farthest point from its own center, excluding earlier re-seeds.
                let far = (0..n)
                    .filter(|i| !reseeded.contains(i))
                    .map(|i| (i, sq_dist(z.row(i), centers.row(labels[i]))))
                    .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
                    .0;
                centers.row_mut(j).assign(&z.row(far));
                reseeded.push(far);
            }
        }
        if !reseeded.is_empty() {
            log::debug!("k-means re-seeded {} empty cluster(s)", reseeded.len());
        }
    }
    assign(z, norms, &centers, &mut labels);
    let wcss = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(z.row(i), centers.row(l)))
        .sum();
    (centers, labels, wcss)
}

/// WCSS of fixed centers (each point charged to its nearest center).
#[cfg(test)]
pub(crate) fn wcss_of(z: ArrayView2<'_, f64>, centers: ArrayView2<'_, f64>) -> f64 {
    z.outer_iter()
        .map(|p| {
            centers
                .outer_iter()
                .map(|c| sq_dist(p, c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn separated_blobs_split_cleanly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut pts = Vec::new();
        for i in 0..40 {
            let base = if i < 20 { 0.0 } else { 100.0 };
            pts.push(base + noise.sample(&mut rng));
        }
        let z = Array2::from_shape_vec((40, 1), pts.clone()).unwrap();
        let res = kmeans(z.view(), 2, 3, 5).unwrap();
        let first = res.labels[0];
        assert!(res.labels[..20].iter().all(|&l| l == first));
        assert!(res.labels[20..].iter().all(|&l| l != first));
        let mean_a: f64 = pts[..20].iter().sum::<f64>() / 20.0;
        let mean_b: f64 = pts[20..].iter().sum::<f64>() / 20.0;
        let c = res.centroids.values();
        assert!((c[[first, 0]] - mean_a).abs() < 1e-9);
        assert!((c[[1 - first, 0]] - mean_b).abs() < 1e-9);
    }

    #[test]
    fn n_equals_k_gives_zero_wcss() {
        let z = array![[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0]];
        let res = kmeans(z.view(), 3, 0, 1).unwrap();
        assert_eq!(res.wcss, 0.0);
        let mut labels = res.labels.clone();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2]);
    }

    #[test]
    fn beats_random_centroid_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Array2::from_shape_fn((30, 2), |_| rng.random_range(-5.0..5.0));
        let res = kmeans(z.view(), 3, 9, DEFAULT_RESTARTS).unwrap();
        for _ in 0..1000 {
            let centers = Array2::from_shape_fn((3, 2), |_| rng.random_range(-5.0..5.0));
            assert!(res.wcss <= wcss_of(z.view(), centers.view()) + 1e-9);
        }
        assert!((res.wcss - wcss_of(z.view(), res.centroids.view())).abs() < 1e-9);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array2::from_shape_fn((50, 4), |_| rng.random_range(-1.0..1.0));
        let a = kmeans(z.view(), 4, 77, 3).unwrap();
        let b = kmeans(z.view(), 4, 77, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_arguments() {
        let z = array![[0.0], [1.0]];
        assert!(kmeans(z.view(), 3, 0, 1).is_err());
        assert!(kmeans(z.view(), 1, 0, 1).is_err());
        assert!(kmeans(z.view(), 2, 0, 0).is_err());
        let dup = array![[1.0], [1.0], [1.0]];
        assert!(kmeans(dup.view(), 2, 0, 1).is_err());
    }
}
