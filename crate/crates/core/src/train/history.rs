use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{DvcError, Result};

pub const LOSS_CSV_HEADER: &str = "iteration,l_c,l_r,total,lr,label_change";

/// One row of the loss history.
///
/// Gradient steps log mini-batch values. Target-update rows log full-dataset
/// values computed from noise-free embeddings, plus the label-change
/// fraction. Pretraining rows carry `l_c = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    /// `KL(P ‖ Q)` summed over the rows involved: the batch, or the whole
    /// dataset on target-update rows.
    pub l_c: f64,
    /// Mean per-sample network loss (reconstruction + prior KL).
    pub l_r: f64,
    pub total: f64,
    pub lr: f64,
    pub label_change: Option<f64>,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        self.l_c.is_finite() && self.l_r.is_finite() && self.total.is_finite()
    }
}

/// Writes the history as CSV. Floats use the shortest round-trip
/// representation, so identical runs give identical bytes.
pub fn write_loss_csv<W: Write>(writer: W, records: &[LossRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let fail = |e: csv::Error| DvcError::format("loss history", e.to_string());
    out.write_record(LOSS_CSV_HEADER.split(',')).map_err(fail)?;
    for r in records {
        let change = r.label_change.map(|c| c.to_string()).unwrap_or_default();
        out.write_record([
            r.iteration.to_string(),
            r.l_c.to_string(),
            r.l_r.to_string(),
            r.total.to_string(),
            r.lr.to_string(),
            change,
        ])
        .map_err(fail)?;
    }
    out.flush()
        .map_err(|e| DvcError::format("loss history", e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = [
            LossRecord {
                iteration: 0,
                l_c: 0.5,
                l_r: 2.0,
                total: 1.85,
                lr: 0.01,
                label_change: Some(0.25),
            },
            LossRecord {
                iteration: 1,
                l_c: 0.25,
                l_r: 1.0,
                total: 0.925,
                lr: 0.01,
                label_change: None,
            },
        ];
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "iteration,l_c,l_r,total,lr,label_change\n0,0.5,2,1.85,0.01,0.25\n1,0.25,1,0.925,0.01,\n"
        );
    }
}
