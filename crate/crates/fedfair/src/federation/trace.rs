//! Per-round experiment records and their CSV / JSONL serialization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Everything measured after one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Mean cross-entropy on the pooled client data.
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub bias_eo: f64,
    pub bias_dp: f64,
    pub bias_cal: f64,
    pub bias_con: f64,
    /// Surrogate loss on the synthetic set; absent before round `s + 1`.
    pub surrogate_syn: Option<f64>,
    /// Whether the calibrated model beat the aggregation-only
    /// counterfactual on the synthetic surrogate this round.
    pub calibrated_dominates: Option<bool>,
}

/// Ordered per-round records of one experiment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricTrace {
    records: Vec<RoundRecord>,
}

impl MetricTrace {
    pub fn new(records: Vec<RoundRecord>) -> Self {
        Self { records }
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&RoundRecord> {
        self.records.last()
    }

    /// Mean of `f` over the final `window` rounds.
    pub fn tail_mean(&self, window: usize, f: impl Fn(&RoundRecord) -> f64) -> f64 {
        let start = self.records.len().saturating_sub(window);
        let tail = &self.records[start..];
        tail.iter().map(&f).sum::<f64>() / tail.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| csv_err(path, e))?;
        for record in &self.records {
            writer.serialize(record).map_err(|e| csv_err(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let records = reader
            .deserialize()
            .collect::<std::result::Result<Vec<RoundRecord>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self { records })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file =
            File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut writer = BufWriter::new(file);
        for record in &self.records {
            let line = serde_json::to_string(record)
                .map_err(|e| json_err(path, e))?;
            writeln!(writer, "{line}")
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        writer
            .flush()
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file =
            File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| json_err(path, e))?);
        }
        Ok(Self { records })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}
