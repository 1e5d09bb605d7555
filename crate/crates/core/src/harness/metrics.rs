//! Per-epoch metric records and their CSV files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diversity::DiversityReport;
use crate::error::{CssError, Result};

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: [&str; 10] = [
    "epoch",
    "net1_branch_mean",
    "net2_branch_mean",
    "net1_agg",
    "net2_agg",
    "dual_ensemble",
    "ce1",
    "ce2",
    "kd",
    "alpha1",
];

pub const DIVERSITY_HEADER: [&str; 3] = ["epoch", "intra_net", "inter_net"];

/// Evaluation summary of one or two networks. Fields of the second network
/// are `None` when network diversity is off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub net1_branch_acc: Vec<f64>,
    pub net2_branch_acc: Option<Vec<f64>>,
    pub net1_branch_mean: f64,
    pub net2_branch_mean: Option<f64>,
    pub net1_agg: f64,
    pub net2_agg: Option<f64>,
    pub dual_ensemble: Option<f64>,
    /// Sum over branches of the mean joint cross-entropy.
    pub ce1: f64,
    pub ce2: Option<f64>,
    pub kd: f64,
    pub alpha1: Option<f64>,
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub net1_branch_mean: f64,
    pub net2_branch_mean: Option<f64>,
    pub net1_agg: f64,
    pub net2_agg: Option<f64>,
    pub dual_ensemble: Option<f64>,
    pub ce1: f64,
    pub ce2: Option<f64>,
    pub kd: f64,
    pub alpha1: Option<f64>,
}

impl MetricsRecord {
    pub fn row(&self) -> MetricsRow {
        MetricsRow {
            epoch: self.epoch,
            net1_branch_mean: self.net1_branch_mean,
            net2_branch_mean: self.net2_branch_mean,
            net1_agg: self.net1_agg,
            net2_agg: self.net2_agg,
            dual_ensemble: self.dual_ensemble,
            ce1: self.ce1,
            ce2: self.ce2,
            kd: self.kd,
            alpha1: self.alpha1,
        }
    }

    /// Every accuracy field.
    pub fn accuracies(&self) -> Vec<f64> {
        let mut out = self.net1_branch_acc.clone();
        out.extend(self.net2_branch_acc.iter().flatten());
        out.push(self.net1_branch_mean);
        out.push(self.net1_agg);
        out.extend(self.net2_branch_mean);
        out.extend(self.net2_agg);
        out.extend(self.dual_ensemble);
        out
    }
}

impl std::fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        write!(
            f,
            "epoch={} net1_branch_mean={} net2_branch_mean={} net1_agg={} net2_agg={} \
             dual_ensemble={} ce1={} ce2={} kd={} alpha1={}",
            self.epoch,
            self.net1_branch_mean,
            opt(self.net2_branch_mean),
            self.net1_agg,
            opt(self.net2_agg),
            opt(self.dual_ensemble),
            self.ce1,
            opt(self.ce2),
            self.kd,
            opt(self.alpha1)
        )
    }
}

/// One line of `diversity.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub epoch: usize,
    pub intra_net: Option<f64>,
    pub inter_net: Option<f64>,
}

impl From<&DiversityReport> for DiversityRow {
    fn from(r: &DiversityReport) -> Self {
        DiversityRow {
            epoch: r.epoch,
            intra_net: r.intra_net,
            inter_net: r.inter_net,
        }
    }
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CssError::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CssError::io(path, e))?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| CssError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(CssError::InvalidArgument(format!(
            "{} has header {found:?}, expected {header:?}",
            path.display()
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(CssError::from))
        .collect()
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let rows: Vec<MetricsRow> = records.iter().map(MetricsRecord::row).collect();
    write_rows(path, &METRICS_HEADER, &rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    read_rows(path, &METRICS_HEADER)
}

pub fn write_diversity_csv(path: &Path, reports: &[DiversityReport]) -> Result<()> {
    let rows: Vec<DiversityRow> = reports.iter().map(DiversityRow::from).collect();
    write_rows(path, &DIVERSITY_HEADER, &rows)
}

pub fn read_diversity_csv(path: &Path) -> Result<Vec<DiversityRow>> {
    read_rows(path, &DIVERSITY_HEADER)
}

/// Training loss of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub ce1: f64,
    pub ce2: Option<f64>,
    pub kd: f64,
    pub alpha1: Option<f64>,
    pub total: f64,
}

pub const STEPS_HEADER: [&str; 7] = ["step", "epoch", "ce1", "ce2", "kd", "alpha1", "total"];

pub fn write_steps_csv(path: &Path, steps: &[StepRecord]) -> Result<()> {
    write_rows(path, &STEPS_HEADER, steps)
}

pub fn read_steps_csv(path: &Path) -> Result<Vec<StepRecord>> {
    read_rows(path, &STEPS_HEADER)
}
