//! Per-epoch training records, persisted as line-delimited JSON. Wall time
//! is reported to stderr only and excluded from the persisted record so that
//! reruns with the same config and seed produce byte-identical logs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean detection loss over the epoch's training scenes.
    pub l_det: f64,
    /// Mean scene-distillation component (unweighted).
    pub l_sup_distill: f64,
    /// Mean object-reconstruction component (unweighted).
    pub l_sup_recon: f64,
    /// Mean total objective: l_det + λ·(α·distill + β·recon).
    pub l_total: f64,
    /// Pooled AP on the evaluation scenes at this epoch.
    pub ap: f64,
    /// Mean per-pixel entropy of the temporal attention (0 when TM is off).
    pub attention_entropy: f64,
    #[serde(skip)]
    pub wall_secs: f64,
}

impl MetricsRecord {
    /// The objective decomposition the record must satisfy.
    pub fn decomposition_residual(&self, lambda: f64, alpha: f64, beta: f64) -> f64 {
        (self.l_total
            - (self.l_det + lambda * (alpha * self.l_sup_distill + beta * self.l_sup_recon)))
            .abs()
    }
}

/// Append one record to a log, flushing so each epoch is durable on its own.
pub fn append_record(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(f, "{line}")?;
    f.flush()?;
    Ok(())
}

pub fn write_log(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(e.to_string())))
        .collect()
}
