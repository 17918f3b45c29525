//! Real-data path: CSV ingestion, standardization, row splitting across
//! machines, and the pooled / weighted / average comparison of the top
//! eigenvalue estimate.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aggregate::{run_algorithm1, AggregateConfig};
use crate::error::{Error, Result};
use crate::experiments::pooled_estimate;
use crate::localnode::{report_from_covariance, sample_covariance, ReportOptions, SpikeHint};
use crate::sampler::LocalDataset;
use crate::seed::{self, tag};

/// Observations in rows, features in columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub values: DMatrix<f64>,
    pub names: Vec<String>,
}

impl TabularDataset {
    pub fn new(values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(Error::LengthMismatch(names.len(), values.ncols()));
        }
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::EmptyFile);
        }
        Ok(TabularDataset { values, names })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    /// Center every column and scale it to unit variance (divisor `rows`).
    pub fn standardize(&mut self) -> Result<()> {
        let n = self.rows() as f64;
        for (j, mut col) in self.values.column_iter_mut().enumerate() {
            let mean = col.sum() / n;
            col.add_scalar_mut(-mean);
            let sd = (col.norm_squared() / n).sqrt();
            if !(sd > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "column {:?} is constant and cannot be standardized",
                    self.names[j]
                )));
            }
            col /= sd;
        }
        Ok(())
    }

    /// The whole table as one `p × rows` shard, rows in file order.
    pub fn as_shard(&self, worker_id: usize) -> Result<LocalDataset> {
        LocalDataset::new(worker_id, self.values.transpose())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub has_header: bool,
    pub standardize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            has_header: true,
            standardize: true,
        }
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | "?")
}

/// Read a rectangular numeric CSV. Rows with missing cells (empty, `NA`,
/// `NaN`, `?`) are dropped; any other non-numeric cell is an error.
pub fn load_csv(path: &Path, options: LoadOptions) -> Result<TabularDataset> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(Error::EmptyFile);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut names: Vec<String> = if options.has_header {
        reader
            .headers()
            .map_err(|e| Error::MalformedCsv(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect()
    } else {
        Vec::new()
    };

    let mut data: Vec<f64> = Vec::new();
    let mut width: Option<usize> = (!names.is_empty()).then_some(names.len());
    let mut rows = 0usize;
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| Error::MalformedCsv(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        match width {
            Some(w) if w != record.len() => {
                return Err(Error::MalformedCsv(format!(
                    "line {line} has {} fields, expected {w}",
                    record.len()
                )))
            }
            None => width = Some(record.len()),
            _ => {}
        }
        if record.iter().any(is_missing) {
            dropped += 1;
            continue;
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::NonNumericCell {
                row: line,
                col: col + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumericCell {
                    row: line,
                    col: col + 1,
                    value: cell.to_string(),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing values");
    }
    let cols = width.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyFile);
    }
    if names.is_empty() {
        names = (1..=cols).map(|j| format!("x{j}")).collect();
    }
    let mut table = TabularDataset::new(DMatrix::from_row_slice(rows, cols, &data), names)?;
    if options.standardize {
        table.standardize()?;
    }
    log::info!("loaded {rows} rows x {cols} columns from {}", path.display());
    Ok(table)
}

/// Shuffle the rows with `seed`, then cut them into `m` contiguous chunks
/// (the first `rows % m` chunks get one extra row). With a single machine
/// the rows stay in file order.
pub fn split_rows(data: &TabularDataset, m: usize, seed_value: u64) -> Result<Vec<LocalDataset>> {
    if m == 0 {
        return Err(Error::InvalidParameter("need at least one machine".into()));
    }
    let (rows, cols) = (data.rows(), data.cols());
    if rows / m <= cols {
        return Err(Error::TooManyMachines {
            m,
            rows_per_shard: rows / m,
            cols,
        });
    }
    if m == 1 {
        return Ok(vec![data.as_shard(0)?]);
    }
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut seed::rng(seed_value, &[tag::SHUFFLE]));
    let mut start = 0;
    (0..m)
        .map(|id| {
            let n = rows / m + usize::from(id < rows % m);
            let chunk = &order[start..start + n];
            start += n;
            LocalDataset::new(id, DMatrix::from_fn(cols, n, |i, j| data.values[(chunk[j], i)]))
        })
        .collect()
}

/// Estimates of the largest spike for one machine count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealRecord {
    pub m: usize,
    pub pooled: f64,
    pub weighted: f64,
    pub avg: f64,
    /// Shards whose top eigenvalue stayed inside the bulk or on its edge.
    pub excluded: usize,
}

/// Pooled, weighted and average estimates of the largest spike at each `m`.
pub fn analyze_real(data: &TabularDataset, m_grid: &[usize], seed_value: u64) -> Result<Vec<RealRecord>> {
    if m_grid.is_empty() {
        return Err(Error::Config("machine grid is empty".into()));
    }
    let splits = m_grid
        .iter()
        .map(|&m| split_rows(data, m, seed_value))
        .collect::<Result<Vec<_>>>()?;
    let hint = SpikeHint::largest();
    let pooled = pooled_estimate(&[data.as_shard(0)?], hint)?;
    let options = ReportOptions::spike_only();
    m_grid
        .iter()
        .zip(splits)
        .map(|(&m, shards)| {
            let mut reports = Vec::with_capacity(m);
            let mut excluded = 0;
            for shard in &shards {
                let s = sample_covariance(shard);
                match report_from_covariance(shard.worker_id, shard.n(), &s, hint, &options, 3.0) {
                    Ok(r) if !r.boundary_flag => reports.push(r),
                    Ok(_) => excluded += 1,
                    Err(e @ Error::NotSpiked { .. }) => {
                        log::warn!("m={m}, shard {}: {e}", shard.worker_id);
                        excluded += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            let result = run_algorithm1(&reports, data.cols(), &AggregateConfig::default())?;
            let avg = reports.iter().map(|r| r.alpha_hat).sum::<f64>() / reports.len() as f64;
            Ok(RealRecord {
                m,
                pooled,
                weighted: result.alpha_tilde,
                avg,
                excluded,
            })
        })
        .collect()
}
