//! Datasets, image batches and their loaders.

mod batch;
mod folder;
mod idx;
mod synth;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

pub use batch::{batch_iterator, BatchSampler};
pub use folder::{load_image_folder, FolderLoad};
pub use idx::{load_idx, load_idx_images, load_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synth_blobs, synth_blobs_with_centers};

use crate::error::{DvcError, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// Flattened length `C·H·W`.
    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Images flattened row-wise (`N × C·H·W`, channel-major) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<F> {
    pub data: Array2<F>,
    pub shape: ImageShape,
}

impl<F: Real> ImageBatch<F> {
    pub fn new(data: Array2<F>, shape: ImageShape) -> Result<Self> {
        if data.ncols() != shape.len() {
            return Err(DvcError::invalid(format!(
                "batch rows have {} values, shape {shape} needs {}",
                data.ncols(),
                shape.len()
            )));
        }
        Ok(Self { data, shape })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }
}

/// An immutable image collection. Labels are carried for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Array2<f32>,
    pub labels: Option<Vec<usize>>,
    pub name: String,
    pub shape: ImageShape,
}

impl Dataset {
    /// Checks the value-range and label invariants.
    pub fn new(
        images: Array2<f32>,
        labels: Option<Vec<usize>>,
        name: impl Into<String>,
        shape: ImageShape,
    ) -> Result<Self> {
        if images.ncols() != shape.len() {
            return Err(DvcError::invalid(format!(
                "images have {} columns, shape {shape} needs {}",
                images.ncols(),
                shape.len()
            )));
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DvcError::domain(format!("pixel value {bad} outside [0, 1]")));
        }
        if let Some(labels) = &labels {
            if labels.len() != images.nrows() {
                return Err(DvcError::Consistency(format!(
                    "{} labels for {} images",
                    labels.len(),
                    images.nrows()
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.nrows() == 0
    }

    /// Number of distinct ground-truth classes (`max label + 1`).
    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn batch<F: Real>(&self, indices: &[usize]) -> ImageBatch<F> {
        let data = self.images.select(Axis(0), indices).mapv(|v| F::of(f64::from(v)));
        ImageBatch {
            data,
            shape: self.shape,
        }
    }

    pub fn all<F: Real>(&self) -> ImageBatch<F> {
        ImageBatch {
            data: self.images.mapv(|v| F::of(f64::from(v))),
            shape: self.shape,
        }
    }

    /// First `n` samples (or all when `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            name: self.name.clone(),
            shape: self.shape,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dataset_invariants() {
        let shape = ImageShape::new(1, 1, 2);
        assert!(Dataset::new(array![[0.0, 1.0]], Some(vec![0]), "t", shape).is_ok());
        assert!(Dataset::new(array![[0.0, 1.5]], None, "t", shape).is_err());
        assert!(matches!(
            Dataset::new(array![[0.0, 1.0]], Some(vec![0, 1]), "t", shape),
            Err(DvcError::Consistency(_))
        ));
        assert!(Dataset::new(array![[0.0, 1.0, 0.0]], None, "t", shape).is_err());
    }

    #[test]
    fn batch_selects_rows() {
        let shape = ImageShape::new(1, 1, 2);
        let ds = Dataset::new(
            array![[0.0, 0.1], [0.2, 0.3], [0.4, 0.5]],
            Some(vec![0, 1, 0]),
            "t",
            shape,
        )
        .unwrap();
        let b: ImageBatch<f64> = ds.batch(&[2, 0]);
        assert_eq!(b.len(), 2);
        assert!((b.data[[0, 1]] - 0.5).abs() < 1e-7);
        assert_eq!(ds.num_classes(), Some(2));
        assert_eq!(ds.head(2).len(), 2);
    }
}
