use rand::seq::SliceRandom;

use super::{Dataset, ImageBatch};
use crate::real::Real;
use crate::rng::{derive_rng, STREAM_SHUFFLE};

/// Deterministic mini-batch schedule over `0..n`.
///
/// Epoch `e` uses a permutation derived from `(seed, e)`, so the batch for any
/// global step can be recomputed without replaying earlier steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSampler {
    pub n: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Self {
        assert!(batch_size >= 1, "batch size must be positive");
        Self {
            n,
            batch_size,
            seed,
            shuffle,
        }
    }

    /// Includes the trailing partial batch.
    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        if self.shuffle {
            order.shuffle(&mut derive_rng(self.seed, &[STREAM_SHUFFLE, epoch]));
        }
        order
    }

    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Indices for global step `step` (epoch-major).
    pub fn batch_at(&self, step: usize) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch().max(1);
        let epoch = (step / per_epoch) as u64;
        let idx = step % per_epoch;
        let order = self.epoch_order(epoch);
        let start = idx * self.batch_size;
        order[start.min(self.n)..(start + self.batch_size).min(self.n)].to_vec()
    }
}

/// One epoch of image batches in the order fixed by `(seed, epoch 0)`.
pub fn batch_iterator<F: Real>(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> impl Iterator<Item = ImageBatch<F>> + '_ {
    BatchSampler::new(dataset.len(), batch_size, seed, shuffle)
        .epoch_batches(0)
        .into_iter()
        .map(move |idx| dataset.batch(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use ndarray::Array2;

    fn ds(n: usize) -> Dataset {
        let images = Array2::from_shape_fn((n, 1), |(i, _)| i as f32 / n as f32);
        Dataset::new(images, None, "seq", ImageShape::new(1, 1, 1)).unwrap()
    }

    #[test]
    fn partial_final_batch() {
        let sizes: Vec<usize> = batch_iterator::<f32>(&ds(10), 4, 0, true).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn unshuffled_keeps_order() {
        let s = BatchSampler::new(10, 4, 0, false);
        assert_eq!(s.epoch_batches(3), vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]);
    }

    #[test]
    fn seeded_and_exhaustive() {
        let a = BatchSampler::new(37, 5, 9, true);
        assert_eq!(a.epoch_batches(2), a.epoch_batches(2));
        assert_ne!(a.epoch_batches(0), a.epoch_batches(1));
        let mut seen: Vec<usize> = a.epoch_batches(4).concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..37).collect::<Vec<_>>());
        let per = a.batches_per_epoch();
        assert_eq!(a.batch_at(per + 2), a.epoch_batches(1)[2]);
    }
}
