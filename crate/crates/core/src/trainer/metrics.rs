use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::datagen::csv_err;
use crate::error::{invalid, Error, Result};

/// Version of the per-checkpoint record layout.
pub const METRIC_SCHEMA_VERSION: u32 = 1;

/// One evaluation checkpoint.
///
/// `ft` refers to the fine-tuning distribution and `pt` to the one whose
/// behaviour should be preserved: the two mixture populations in the toy
/// run, task 2 and task 1 in the retention run. Fields that do not apply
/// to an experiment are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub schema_version: u32,
    pub experiment: String,
    pub method: String,
    pub step: u64,
    /// Adapter / dense learning rate applied at this step.
    pub lr: f64,
    pub gate_lr: Option<f64>,
    /// Training objective on the held-out sample of the training
    /// distribution.
    pub train_loss: f64,
    pub mse_ft: Option<f64>,
    pub mse_ft_se: Option<f64>,
    pub mse_pt: Option<f64>,
    pub mse_pt_se: Option<f64>,
    pub ft_accuracy: Option<f64>,
    pub retention_accuracy: Option<f64>,
    pub gate_mean_ft: Option<f64>,
    pub gate_mean_pt: Option<f64>,
}

impl MetricRecord {
    pub fn new(experiment: &str, method: &str, step: u64, lr: f64, train_loss: f64) -> Self {
        Self {
            schema_version: METRIC_SCHEMA_VERSION,
            experiment: experiment.into(),
            method: method.into(),
            step,
            lr,
            gate_lr: None,
            train_loss,
            mse_ft: None,
            mse_ft_se: None,
            mse_pt: None,
            mse_pt_se: None,
            ft_accuracy: None,
            retention_accuracy: None,
            gate_mean_ft: None,
            gate_mean_pt: None,
        }
    }
}

const CSV_COLUMNS: [&str; 15] = [
    "schema_version",
    "experiment",
    "method",
    "step",
    "lr",
    "gate_lr",
    "train_loss",
    "mse_ft",
    "mse_ft_se",
    "mse_pt",
    "mse_pt_se",
    "ft_accuracy",
    "retention_accuracy",
    "gate_mean_ft",
    "gate_mean_pt",
];

/// Append-only sequence of checkpoint records; steps strictly increase
/// within each method.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(prev) = self
            .records
            .iter()
            .rev()
            .find(|r| r.method == record.method && r.experiment == record.experiment)
        {
            if record.step <= prev.step {
                return invalid(format!(
                    "checkpoint step {} for '{}' does not follow step {}",
                    record.step, record.method, prev.step
                ));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn extend(&mut self, other: MetricLog) -> Result<()> {
        other.records.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn method(&self, name: &str) -> Vec<&MetricRecord> {
        self.records.iter().filter(|r| r.method == name).collect()
    }

    pub fn last(&self, method: &str) -> Option<&MetricRecord> {
        self.records.iter().rev().find(|r| r.method == method)
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut log = Self::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MetricRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("metric record on line {}: {e}", i + 1)))?;
            if rec.schema_version != METRIC_SCHEMA_VERSION {
                return Err(Error::Format(format!(
                    "unsupported metric schema {}",
                    rec.schema_version
                )));
            }
            log.push(rec)?;
        }
        Ok(log)
    }

    /// Same fields as the line records; absent values are empty cells.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_COLUMNS).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            out.write_record([
                r.schema_version.to_string(),
                r.experiment.clone(),
                r.method.clone(),
                r.step.to_string(),
                r.lr.to_string(),
                opt(r.gate_lr),
                r.train_loss.to_string(),
                opt(r.mse_ft),
                opt(r.mse_ft_se),
                opt(r.mse_pt),
                opt(r.mse_pt_se),
                opt(r.ft_accuracy),
                opt(r.retention_accuracy),
                opt(r.gate_mean_ft),
                opt(r.gate_mean_pt),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}
