use ndarray::Array2;
use rand_distr::{Distribution, Normal};

use super::{Dataset, ImageShape};
use crate::error::{DvcError, Result};
use crate::rng::{derive_rng, STREAM_SYNTH};

const MAX_CENTER_TRIES: usize = 10_000;

/// Isotropic Gaussian clusters squashed into `[0, 1]`.
///
/// Centers are drawn from `N(0, separation²·I)` and redrawn until every pair
/// is at least `separation` apart. A single affine map (global min → 0,
/// global max → 1) then squashes samples and centers alike, so relative
/// geometry is preserved. Samples are stored cluster by cluster and the
/// label is the generating component. Square `dim` values yield a
/// single-channel `√dim × √dim` image shape, others a `1 × dim` strip.
pub fn synth_blobs_with_centers(
    k: usize,
    per_cluster: usize,
    dim: usize,
    separation: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Dataset, Array2<f64>)> {
    if k < 2 {
        return Err(DvcError::invalid(format!("need K >= 2 blobs, got {k}")));
    }
    if dim == 0 {
        return Err(DvcError::invalid("dimension must be positive"));
    }
    if !(separation > 0.0 && noise_sigma > 0.0) {
        return Err(DvcError::invalid("separation and noise_sigma must be positive"));
    }
    let mut rng = derive_rng(seed, &[STREAM_SYNTH]);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");

    let mut centers = Array2::<f64>::zeros((k, dim));
    let mut scale = separation;
    let mut tries = 0;
    let mut placed = 0;
    while placed < k {
        let candidate: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng) * scale).collect();
        let far_enough = (0..placed).all(|j| {
            let d2: f64 = centers
                .row(j)
                .iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            d2.sqrt() >= separation
        });
        if far_enough {
            centers.row_mut(placed).assign(&ndarray::ArrayView1::from(&candidate));
            placed += 1;
        } else {
            tries += 1;
            if tries % MAX_CENTER_TRIES == 0 {
                scale *= 2.0;
            }
        }
    }

    let n = k * per_cluster;
    let mut raw = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        for s in 0..per_cluster {
            let mut row = raw.row_mut(c * per_cluster + s);
            for (v, &m) in row.iter_mut().zip(centers.row(c)) {
                *v = m + noise_sigma * unit.sample(&mut rng);
            }
            labels.push(c);
        }
    }

    let (lo, hi) = raw
        .iter()
        .chain(centers.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let squash = |v: f64| ((v - lo) / span).clamp(0.0, 1.0);
    let images = raw.mapv(|v| squash(v) as f32);
    let centers = centers.mapv(squash);

    let side = (dim as f64).sqrt().round() as usize;
    let shape = if side * side == dim {
        ImageShape::new(1, side, side)
    } else {
        ImageShape::new(1, 1, dim)
    };
    let dataset = Dataset::new(images, Some(labels), format!("blobs-k{k}-d{dim}"), shape)?;
    Ok((dataset, centers))
}

pub fn synth_blobs(
    k: usize,
    per_cluster: usize,
    dim: usize,
    separation: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    synth_blobs_with_centers(k, per_cluster, dim, separation, noise_sigma, seed).map(|(d, _)| d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_center_recovers_labels() {
        let (ds, centers) = synth_blobs_with_centers(3, 400, 64, 10.0, 1.0, 4).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        let mut correct = 0;
        for (row, &label) in ds.images.outer_iter().zip(labels) {
            let nearest = (0..3)
                .map(|j| {
                    let d: f64 = row
                        .iter()
                        .zip(centers.row(j))
                        .map(|(&a, &b)| (f64::from(a) - b).powi(2))
                        .sum();
                    (j, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            correct += usize::from(nearest == label);
        }
        assert!(correct as f64 / labels.len() as f64 >= 0.999);
        assert_eq!(ds.shape, ImageShape::new(1, 8, 8));
    }

    #[test]
    fn centers_respect_separation() {
        let (_, centers) = synth_blobs_with_centers(6, 1, 2, 3.0, 0.1, 9).unwrap();
        // Separation is measured before squashing; squashing is one isotropic
        // scale, so all pairwise distances shrink by the same factor.
        let mut dists = Vec::new();
        for a in 0..6 {
            for b in (a + 1)..6 {
                let d: f64 = centers
                    .row(a)
                    .iter()
                    .zip(centers.row(b))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                dists.push(d.sqrt());
            }
        }
        assert!(dists.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn deterministic_and_empty() {
        assert_eq!(
            synth_blobs(3, 5, 16, 10.0, 1.0, 1).unwrap(),
            synth_blobs(3, 5, 16, 10.0, 1.0, 1).unwrap()
        );
        assert_ne!(
            synth_blobs(3, 5, 16, 10.0, 1.0, 1).unwrap(),
            synth_blobs(3, 5, 16, 10.0, 1.0, 2).unwrap()
        );
        assert!(synth_blobs(3, 0, 16, 10.0, 1.0, 1).unwrap().is_empty());
        assert!(synth_blobs(1, 5, 16, 10.0, 1.0, 1).is_err());
    }
}
