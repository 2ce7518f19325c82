//! Writers for run artifacts: CSV tables, JSON summaries and sample grids.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use dvc_core::{DvcError, ImageBatch, Real};
use image::{GrayImage, ImageFormat, RgbImage};
use ndarray::ArrayView2;
use serde::Serialize;

use crate::CliResult;

pub const MANIFEST: &str = "run_manifest.json";
pub const METRICS: &str = "metrics.json";
pub const LABELS: &str = "labels.csv";
pub const LOSS: &str = "loss.csv";
pub const PRETRAIN_LOSS: &str = "pretrain_loss.csv";
pub const CONVERGENCE: &str = "convergence.json";
pub const PRETRAINED: &str = "pretrained.ckpt";
pub const STATE: &str = "state.ckpt";
pub const FINAL: &str = "final.ckpt";
pub const FAILURE_DUMP: &str = "failure.ckpt";
pub const EMBEDDINGS: &str = "embeddings.csv";
pub const SAMPLES: &str = "samples.png";
pub const REPORT: &str = "report.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DvcError + '_ {
    move |e| DvcError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> DvcError + '_ {
    move |e| DvcError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DvcError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

/// `id,label`, one row per sample.
pub fn write_labels(path: &Path, labels: &[usize]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["id", "label"]).map_err(csv_err(path))?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads `id,label` rows back, requiring ids `0..n` exactly once each.
pub fn read_labels(path: &Path, n: usize) -> CliResult<Vec<usize>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let headers = r.headers().map_err(csv_err(path))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "label"] {
        return Err(DvcError::Format {
            path: path.to_path_buf(),
            reason: "expected header `id,label`".into(),
        }
        .into());
    }
    let mut labels: Vec<Option<usize>> = vec![None; n];
    for row in r.records() {
        let row = row.map_err(csv_err(path))?;
        let parse = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| DvcError::Format {
                path: path.to_path_buf(),
                reason: format!("not a non-negative integer: `{s}`"),
            })
        };
        let (id, label) = (parse(&row[0])?, parse(&row[1])?);
        match labels.get_mut(id) {
            Some(slot @ None) => *slot = Some(label),
            Some(Some(_)) => return Err(DvcError::Consistency(format!("id {id} appears twice")).into()),
            None => return Err(DvcError::Consistency(format!("id {id} is outside the dataset (n = {n})")).into()),
        }
    }
    let missing = labels.iter().filter(|l| l.is_none()).count();
    if missing > 0 {
        return Err(DvcError::Consistency(format!("{missing} dataset ids have no label")).into());
    }
    Ok(labels.into_iter().map(|l| l.expect("checked")).collect())
}

/// `id,z0,…,z{d−1},cluster`.
pub fn write_embeddings(path: &Path, z: ArrayView2<'_, f64>, clusters: &[usize]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["id".to_string()];
    header.extend((0..z.ncols()).map(|j| format!("z{j}")));
    header.push("cluster".into());
    w.write_record(&header).map_err(csv_err(path))?;
    for (i, (row, c)) in z.rows().into_iter().zip(clusters).enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        rec.push(c.to_string());
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Quantizes `(0, 1)` values to bytes.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles images row-major into a grid with `ceil(sqrt(n))` columns and
/// saves it as PNG.
pub fn write_grid<F: Real>(path: &Path, batch: &ImageBatch<F>) -> CliResult<(usize, usize)> {
    let n = batch.len();
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    let shape = batch.shape;
    let (h, w) = (shape.height, shape.width);
    let (gw, gh) = ((cols * w) as u32, (rows * h) as u32);
    let pixel = |i: usize, c: usize, y: usize, x: usize| quantize(batch.data[(i, (c * h + y) * w + x)].as_f64());
    let result = match shape.channels {
        1 => {
            let mut img = GrayImage::new(gw, gh);
            for i in 0..n {
                let (oy, ox) = ((i / cols) * h, (i % cols) * w);
                for y in 0..h {
                    for x in 0..w {
                        img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Luma([pixel(i, 0, y, x)]));
                    }
                }
            }
            save(path, |f| img.write_to(f, ImageFormat::Png))
        }
        3 => {
            let mut img = RgbImage::new(gw, gh);
            for i in 0..n {
                let (oy, ox) = ((i / cols) * h, (i % cols) * w);
                for y in 0..h {
                    for x in 0..w {
                        let px = [pixel(i, 0, y, x), pixel(i, 1, y, x), pixel(i, 2, y, x)];
                        img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb(px));
                    }
                }
            }
            save(path, |f| img.write_to(f, ImageFormat::Png))
        }
        c => {
            return Err(DvcError::InvalidArgument(format!("cannot render images with {c} channels")).into());
        }
    };
    result?;
    Ok((rows, cols))
}

fn save(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> image::ImageResult<()>) -> CliResult<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write(&mut out).map_err(|e| DvcError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dvc_core::ImageShape;
    use ndarray::Array2;

    #[test]
    fn labels_round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        write_labels(&p, &[2, 0, 1]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "id,label\n0,2\n1,0\n2,1\n");
        assert_eq!(read_labels(&p, 3).unwrap(), vec![2, 0, 1]);
        assert!(read_labels(&p, 4).is_err());
        assert!(read_labels(&p, 2).is_err());
    }

    #[test]
    fn grid_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let batch = ImageBatch::new(Array2::<f32>::from_elem((16, 4), 0.5), ImageShape::new(1, 2, 2)).unwrap();
        assert_eq!(write_grid(&p, &batch).unwrap(), (4, 4));
        let img = image::open(&p).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (8, 8));
        assert!(img.pixels().all(|p| p.0[0] == 128));
        let five = ImageBatch::new(Array2::<f32>::zeros((5, 4)), ImageShape::new(1, 2, 2)).unwrap();
        assert_eq!(write_grid(&p, &five).unwrap(), (2, 3));
    }

    #[test]
    fn quantization_endpoints() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(1e-9), 0);
        assert_eq!(quantize(2.0), 255);
    }
}
