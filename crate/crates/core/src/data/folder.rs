use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use ndarray::Array2;

use super::{Dataset, ImageShape};
use crate::error::{DvcError, Result};

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Result of a folder load: the dataset plus files that failed to decode.
#[derive(Debug)]
pub struct FolderLoad {
    pub dataset: Dataset,
    pub skipped: Vec<(PathBuf, String)>,
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| DvcError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| DvcError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn to_pixels(img: DynamicImage, height: usize, width: usize, grayscale: bool) -> Vec<f32> {
    let (w, h) = (width as u32, height as u32);
    let resize = |img: DynamicImage| {
        if img.width() == w && img.height() == h {
            img
        } else {
            img.resize_exact(w, h, FilterType::Triangle)
        }
    };
    if grayscale {
        let img = resize(DynamicImage::ImageLuma8(img.to_luma8())).to_luma8();
        img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect()
    } else {
        let img = resize(DynamicImage::ImageRgb8(img.to_rgb8())).to_rgb8();
        let plane = height * width;
        let mut out = vec![0.0f32; 3 * plane];
        for (p, px) in img.pixels().enumerate() {
            for c in 0..3 {
                out[c * plane + p] = f32::from(px[c]) / 255.0;
            }
        }
        out
    }
}

/// Loads `root/<class>/<file>` (labeled, classes in sorted order) or a flat
/// `root/<file>` directory (unlabeled). Images are converted to luminance when
/// `grayscale` is set, bilinearly resized and scaled to `[0, 1]`.
pub fn load_image_folder(root: &Path, height: usize, width: usize, grayscale: bool) -> Result<FolderLoad> {
    if height == 0 || width == 0 {
        return Err(DvcError::invalid("target size must be positive"));
    }
    let entries = sorted_entries(root)?;
    let class_dirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut files: Vec<(PathBuf, Option<usize>)> = Vec::new();
    if class_dirs.is_empty() {
        files.extend(entries.iter().filter(|p| is_image(p)).map(|p| (p.clone(), None)));
    } else {
        for (label, dir) in class_dirs.iter().enumerate() {
            for file in sorted_entries(dir)?.into_iter().filter(|p| is_image(p)) {
                files.push((file, Some(label)));
            }
        }
    }
    if files.is_empty() {
        return Err(DvcError::invalid(format!("no images under {}", root.display())));
    }

    let shape = ImageShape::new(if grayscale { 1 } else { 3 }, height, width);
    let mut pixels = Vec::with_capacity(files.len() * shape.len());
    let mut labels = Vec::with_capacity(files.len());
    let mut skipped = Vec::new();
    for (path, label) in files {
        match image::open(&path) {
            Ok(img) => {
                pixels.extend(to_pixels(img, height, width, grayscale));
                labels.push(label);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push((path, e.to_string()));
            }
        }
    }
    if labels.is_empty() {
        return Err(DvcError::invalid(format!(
            "none of the {} images under {} could be decoded",
            skipped.len(),
            root.display()
        )));
    }
    if !skipped.is_empty() {
        log::warn!("{} file(s) skipped under {}", skipped.len(), root.display());
    }
    let n = labels.len();
    let labels = if class_dirs.is_empty() {
        None
    } else {
        Some(labels.into_iter().map(|l| l.expect("labeled layout")).collect())
    };
    let images = Array2::from_shape_vec((n, shape.len()), pixels).expect("pixel count");
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| root.display().to_string());
    let dataset = Dataset::new(images, labels, name, shape)?;
    Ok(FolderLoad { dataset, skipped })
}
