//! Experiment records and the on-disk formats the harness writes them in:
//! JSON-lines for records and training traces, CSV for metric tables.
//!
//! The records file is append-only. A rerun of the same cell appends a
//! fresh record rather than rewriting history; readers keep the last record
//! per (fingerprint, seed, n) key.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Failure;

/// One trained timestep of a cell: its final training loss and its Monte
/// Carlo risk against the exact score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepRow {
    pub t: f64,
    pub loss: f64,
    pub risk: f64,
    pub se: f64,
    pub radius: f64,
}

/// Reverse-chain diagnostics of a sampled cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerMetrics {
    /// Mean squared distance of the samples to the model subspace, with the
    /// noise-floor budget 3σ_ζ²(D−d) it is judged against. Subspace targets
    /// only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subspace_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_budget: Option<f64>,
    /// Energy distance between generated samples and a fresh draw corrupted
    /// to the stopping time, with the 95th percentile of its permutation
    /// null.
    pub energy_distance: f64,
    pub energy_null_q95: f64,
}

/// Everything one cell run produced, one JSON line per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub fingerprint: String,
    pub seed: u64,
    pub n: usize,
    pub ambient_dim: usize,
    pub latent_dim: usize,
    /// Forward time of the probe row that reports fit against n.
    pub probe_t: f64,
    pub rows: Vec<TimestepRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerMetrics>,
    /// Wall-clock duration of the cell. Excluded from reproducibility
    /// comparisons; everything else is bit-stable for a fixed config.
    pub wall_ms: u64,
}

impl ExperimentRecord {
    /// The rows trained at the probe time.
    pub fn probe_rows(&self) -> impl Iterator<Item = &TimestepRow> {
        self.rows.iter().filter(|r| r.t == self.probe_t)
    }
}

pub fn append_records(path: &Path, records: &[ExperimentRecord]) -> Result<(), Failure> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Failure::runtime(format!("cannot open {}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(Failure::runtime)?;
        writeln!(out, "{line}").map_err(Failure::runtime)?;
    }
    out.flush().map_err(Failure::runtime)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>, Failure> {
    let file = File::open(path)
        .map_err(|e| Failure::runtime(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(Failure::runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExperimentRecord = serde_json::from_str(&line).map_err(|e| {
            Failure::runtime(format!("{}:{}: bad record: {e}", path.display(), i + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Drops superseded reruns, keeping the last record per (fingerprint, seed,
/// n) in first-appearance order.
pub fn dedupe_records(records: Vec<ExperimentRecord>) -> Vec<ExperimentRecord> {
    let mut last: BTreeMap<(String, u64, usize), usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        last.insert((r.fingerprint.clone(), r.seed, r.n), i);
    }
    let mut keep: Vec<usize> = last.into_values().collect();
    keep.sort_unstable();
    let mut by_index: Vec<Option<ExperimentRecord>> = records.into_iter().map(Some).collect();
    keep.iter()
        .map(|&i| by_index[i].take().expect("index appears once"))
        .collect()
}

/// One line of a metrics CSV: `metric,t,estimate,se,n_mc`. Aggregate
/// metrics that do not live at a single time leave `t` empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub t: Option<f64>,
    pub estimate: f64,
    pub se: f64,
    pub n_mc: usize,
}

pub fn write_metrics_csv(
    path: &Path,
    fingerprint: &str,
    rows: &[MetricRow],
) -> Result<(), Failure> {
    let file = File::create(path)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# fingerprint={fingerprint}").map_err(Failure::runtime)?;
    writeln!(out, "metric,t,estimate,se,n_mc").map_err(Failure::runtime)?;
    for row in rows {
        let t = row.t.map_or(String::new(), |t| format!("{t}"));
        writeln!(
            out,
            "{},{},{},{},{}",
            row.metric, t, row.estimate, row.se, row.n_mc
        )
        .map_err(Failure::runtime)?;
    }
    out.flush().map_err(Failure::runtime)?;
    Ok(())
}

/// Sidecar describing a binary artifact, so binary layouts stay fixed while
/// still being attributable to a config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinarySidecar {
    pub fingerprint: String,
    pub rows: usize,
    pub dim: usize,
    pub t: f64,
}

pub fn write_sidecar(path: &Path, sidecar: &BinarySidecar) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(sidecar).map_err(Failure::runtime)?;
    std::fs::write(path, text)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}
