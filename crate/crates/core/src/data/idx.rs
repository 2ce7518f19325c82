use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::Array2;

use super::{Dataset, ImageShape};
use crate::error::{DvcError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads the whole file, inflating it when the name ends in `.gz`.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| DvcError::io(path, e))?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    let res = if gz {
        GzDecoder::new(file).read_to_end(&mut bytes)
    } else {
        let mut file = file;
        file.read_to_end(&mut bytes)
    };
    res.map_err(|e| DvcError::format(path, format!("cannot read: {e}")))?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DvcError::format(path, "truncated header"))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn load_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DvcError::format(path, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(DvcError::format(
            path,
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    Ok((n, rows, cols, payload[..need].to_vec()))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DvcError::format(path, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(DvcError::format(
            path,
            format!("truncated payload: {} of {n} labels", payload.len()),
        ));
    }
    Ok(payload[..n].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an MNIST-style IDX pair; pixel bytes are scaled by `1/255`.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let (n, rows, cols, pixels) = load_idx_images(images_path)?;
    let labels = match labels_path {
        Some(p) => {
            let labels = load_idx_labels(p)?;
            if labels.len() != n {
                return Err(DvcError::Consistency(format!(
                    "{} has {} labels but {} has {n} images",
                    p.display(),
                    labels.len(),
                    images_path.display()
                )));
            }
            Some(labels)
        }
        None => None,
    };
    let images = Array2::from_shape_vec(
        (n, rows * cols),
        pixels.into_iter().map(|b| f32::from(b) / 255.0).collect(),
    )
    .expect("payload length checked");
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(images, labels, name, ImageShape::new(1, rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn reads_two_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut payload = vec![0u8; 1568];
        payload[0] = 255;
        payload[784] = 51;
        let img = write(dir.path(), "img", &idx_images(2, 28, 28, &payload));
        let lab = write(dir.path(), "lab", &idx_labels(&[3, 7]));
        let ds = load_idx(&img, Some(&lab)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.shape, ImageShape::new(1, 28, 28));
        assert_eq!(ds.images[[0, 0]], 1.0);
        assert_eq!(ds.images[[0, 1]], 0.0);
        assert_eq!(ds.images[[1, 0]], 0.2);
        assert_eq!(ds.labels, Some(vec![3, 7]));
    }

    #[test]
    fn gzip_by_suffix() {
        let dir = tempfile::tempdir().unwrap();
        let raw = idx_images(1, 2, 2, &[0, 64, 128, 255]);
        let path = dir.path().join("img.gz");
        let mut enc = flate2::write::GzEncoder::new(File::create(&path).unwrap(), flate2::Compression::fast());
        enc.write_all(&raw).unwrap();
        enc.finish().unwrap();
        let ds = load_idx(&path, None).unwrap();
        assert_eq!(ds.images.row(0).to_vec(), vec![0.0, 64.0 / 255.0, 128.0 / 255.0, 1.0]);
        assert!(ds.labels.is_none());
    }

    #[test]
    fn errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = idx_images(1, 2, 2, &[0; 4]);
        bad[3] = 0x01;
        let bad = write(dir.path(), "bad", &bad);
        assert!(matches!(load_idx(&bad, None), Err(DvcError::Format { .. })));

        let short = write(dir.path(), "short", &idx_images(2, 2, 2, &[0; 5]));
        assert!(matches!(load_idx(&short, None), Err(DvcError::Format { .. })));

        let img = write(dir.path(), "img", &idx_images(2, 1, 1, &[0, 1]));
        let lab = write(dir.path(), "lab", &idx_labels(&[0, 1, 2]));
        assert!(matches!(load_idx(&img, Some(&lab)), Err(DvcError::Consistency(_))));

        assert!(matches!(
            load_idx(&dir.path().join("missing"), None),
            Err(DvcError::Io { .. })
        ));
    }

    /// Loading the same file twice yields identical datasets.
    #[test]
    fn deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &idx_images(3, 2, 2, &[7; 12]));
        assert_eq!(load_idx(&img, None).unwrap(), load_idx(&img, None).unwrap());
    }
}
