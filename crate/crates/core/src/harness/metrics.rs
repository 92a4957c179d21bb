//! Line-delimited JSON training metrics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: u8,
    pub train_loss: f64,
    pub lr: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub paired_accuracy: Option<f64>,
    pub mean_mask: Option<f64>,
    /// Fraction of mask entries below 0.1.
    pub mask_sparsity: Option<f64>,
    pub wall_time_s: Option<f64>,
}

impl MetricsRecord {
    pub fn new(stage: u8, step: u64, train_loss: f64, lr: f64) -> Self {
        Self {
            step,
            stage,
            train_loss,
            lr,
            val_loss: None,
            val_accuracy: None,
            paired_accuracy: None,
            mean_mask: None,
            mask_sparsity: None,
            wall_time_s: None,
        }
    }
}

/// Appends records, enforcing strictly increasing steps within a stage.
pub struct MetricsWriter {
    out: Option<BufWriter<File>>,
    last: Option<(u8, u64)>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            out: Some(BufWriter::new(File::create(path)?)),
            last: None,
        })
    }

    /// Checks ordering but writes nothing.
    pub fn discard() -> Self {
        Self { out: None, last: None }
    }

    pub fn append(&mut self, r: &MetricsRecord) -> Result<()> {
        if let Some((stage, step)) = self.last {
            if r.stage < stage || (r.stage == stage && r.step <= step) {
                return Err(Error::Contract(format!(
                    "metrics out of order: stage {} step {} after stage {stage} step {step}",
                    r.stage, r.step
                )));
            }
        }
        self.last = Some((r.stage, r.step));
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
