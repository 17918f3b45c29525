//! Seeded Monte Carlo harness comparing the pooled, weighted and plain
//! average estimators.
//!
//! Every replication draws a shard-size plan and the shards themselves, then
//! evaluates all estimators on those same shards. Random streams are
//! addressed by `(master seed, p, m, n_total, rep, worker)`, so results do
//! not depend on thread scheduling.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{run_algorithm1, AggregateConfig, InitialStrategy, WeightMode};
use crate::error::{Error, Result};
use crate::localnode::{gamma4_estimate, gram, report_from_covariance, Gamma4Mode, LocalEstimate, ReportOptions, SpikeHint};
use crate::sampler::{make_partition, EntryDistribution, LocalDataset, PartitionRule, Population, Rotation, SpikedModel};
use crate::seed::{self, tag};
use crate::spectrum::SpikeSide;
use crate::stats::{self, Bin};

/// Desk-scale grid limits; `full_scale` lifts them.
pub const MAX_P: usize = 200;
pub const MAX_M: usize = 100;
pub const DEFAULT_REPS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeSpec {
    pub alpha: f64,
    pub side: SpikeSide,
}

impl SpikeSpec {
    pub fn hint(&self) -> SpikeHint {
        SpikeHint {
            k: 1,
            side: self.side,
            m_total: 1,
        }
    }
}

fn default_reps() -> usize {
    DEFAULT_REPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub p_grid: Vec<usize>,
    pub m_grid: Vec<usize>,
    pub spike: SpikeSpec,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub partition: PartitionRule,
    #[serde(default)]
    pub entry_dist: EntryDistribution,
    #[serde(default)]
    pub rotation: Rotation,
    #[serde(default)]
    pub gamma4_mode: Gamma4Mode,
    #[serde(default)]
    pub weight_mode: WeightMode,
    /// Pilot strategies. Empty means the mean of local estimates for the MSE
    /// grid and all three strategies for the initial-value study.
    #[serde(default)]
    pub initial_strategies: Vec<InitialStrategy>,
    #[serde(default)]
    pub master_seed: u64,
    /// Total sample sizes for the rate study (equal shards).
    #[serde(default)]
    pub n_totals: Vec<usize>,
    #[serde(default)]
    pub full_scale: bool,
}

impl ExperimentConfig {
    /// A single-cell configuration with desk-scale defaults.
    pub fn new(p: usize, m: usize, spike: SpikeSpec) -> Self {
        ExperimentConfig {
            p_grid: vec![p],
            m_grid: vec![m],
            spike,
            reps: default_reps(),
            partition: PartitionRule::default(),
            entry_dist: EntryDistribution::default(),
            rotation: Rotation::default(),
            gamma4_mode: Gamma4Mode::default(),
            weight_mode: WeightMode::default(),
            initial_strategies: Vec::new(),
            master_seed: 0,
            n_totals: Vec::new(),
            full_scale: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.p_grid.is_empty() || self.m_grid.is_empty() {
            return Err(Error::Config("p and m grids must be nonempty".into()));
        }
        if self.p_grid.contains(&0) || self.m_grid.contains(&0) {
            return Err(Error::Config("grid entries must be positive".into()));
        }
        if !self.full_scale && (self.p_grid.iter().any(|&p| p > MAX_P) || self.m_grid.iter().any(|&m| m > MAX_M)) {
            return Err(Error::Config(format!(
                "grids are capped at p <= {MAX_P}, m <= {MAX_M}; set full_scale to lift the cap"
            )));
        }
        let side = SpikeSide::of(self.spike.alpha)
            .ok_or_else(|| Error::Config(format!("spike {} must be positive and not 1", self.spike.alpha)))?;
        if side != self.spike.side {
            return Err(Error::Config(format!(
                "spike {} is not on the {:?} side",
                self.spike.alpha, self.spike.side
            )));
        }
        Ok(())
    }

    fn population(&self, p: usize) -> Result<Population> {
        Population::new(SpikedModel::new(p, vec![self.spike.alpha], self.entry_dist, self.rotation)?)
    }

    fn options(&self) -> ReportOptions {
        // Σu⁴ only matters when the fourth moment is estimated and used.
        let needs_u4 = self.gamma4_mode != Gamma4Mode::GaussianAssumption
            && matches!(self.weight_mode, WeightMode::EstimatedGeneral);
        ReportOptions {
            gamma4_mode: self.gamma4_mode,
            estimate_u4: needs_u4,
            ..ReportOptions::default()
        }
    }

    fn aggregate_configs(&self, initials: &[InitialStrategy]) -> Vec<AggregateConfig> {
        initials
            .iter()
            .map(|&initial| AggregateConfig {
                weight_mode: self.weight_mode,
                initial,
            })
            .collect()
    }

    fn grid_initial(&self) -> InitialStrategy {
        self.initial_strategies.first().copied().unwrap_or_default()
    }
}

/// One row of an MSE table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub p: usize,
    pub m: usize,
    pub reps: usize,
    pub mse_pooled: f64,
    pub mse_weighted: f64,
    pub mse_avg: f64,
    pub failures: usize,
}

/// What one replication produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    pub pooled: f64,
    /// One weighted estimate per aggregate configuration.
    pub weighted: Vec<f64>,
    /// Standardized errors `(α̃-α)/stderr`, per configuration.
    pub z: Vec<Option<f64>>,
    pub avg: f64,
}

struct Cell<'a> {
    cfg: &'a ExperimentConfig,
    pop: Population,
    p: usize,
    m: usize,
    partition: PartitionRule,
    n_total: usize,
    options: ReportOptions,
    aggregates: Vec<AggregateConfig>,
}

impl<'a> Cell<'a> {
    fn new(cfg: &'a ExperimentConfig, p: usize, m: usize, initials: &[InitialStrategy]) -> Result<Self> {
        Ok(Cell {
            cfg,
            pop: cfg.population(p)?,
            p,
            m,
            partition: cfg.partition.clone(),
            n_total: 0,
            options: cfg.options(),
            aggregates: cfg.aggregate_configs(initials),
        })
    }

    fn path(&self, domain: u64, rep: usize) -> u64 {
        seed::derive(
            self.cfg.master_seed,
            &[domain, self.p as u64, self.m as u64, self.n_total as u64, rep as u64],
        )
    }

    fn shards(&self, rep: usize) -> Result<Vec<LocalDataset>> {
        let plan = make_partition(self.p, self.m, &self.partition, self.path(tag::PARTITION, rep))?;
        let sample_seed = self.path(tag::WORKER, rep);
        plan.sizes
            .iter()
            .enumerate()
            .map(|(id, &n)| self.pop.sample(n, sample_seed, id))
            .collect()
    }

    fn replicate(&self, rep: usize) -> Result<RepOutcome> {
        let hint = self.cfg.spike.hint();
        let shards = self.shards(rep)?;
        let mut pooled_gram = DMatrix::<f64>::zeros(self.p, self.p);
        let mut reports: Vec<LocalEstimate> = Vec::with_capacity(shards.len());
        for data in &shards {
            let g = gram(data);
            pooled_gram += &g;
            let gamma4 = gamma4_estimate(data, self.options.gamma4_mode, Some(&self.pop.root))?;
            let s = g / data.n() as f64;
            match report_from_covariance(data.worker_id, data.n(), &s, hint, &self.options, gamma4) {
                Ok(r) => reports.push(r),
                Err(e) => log::debug!("rep {rep}, worker {}: {e}", data.worker_id),
            }
        }
        let pooled = pooled_from_gram(pooled_gram, shards.iter().map(LocalDataset::n).sum(), hint)?;

        let mut weighted = Vec::with_capacity(self.aggregates.len());
        let mut z = Vec::with_capacity(self.aggregates.len());
        for agg in &self.aggregates {
            let result = run_algorithm1(&reports, self.p, agg)?;
            weighted.push(result.alpha_tilde);
            z.push(result.z_score(self.cfg.spike.alpha));
        }
        let kept: Vec<f64> = reports
            .iter()
            .filter(|r| !r.boundary_flag && r.alpha_hat.is_finite())
            .map(|r| r.alpha_hat)
            .collect();
        Ok(RepOutcome {
            pooled,
            weighted,
            z,
            avg: stats::mean(&kept),
        })
    }

    /// All replications, in rep order; failures are logged and kept as `None`.
    fn run(&self) -> Vec<Option<RepOutcome>> {
        (0..self.cfg.reps)
            .into_par_iter()
            .map(|rep| match self.replicate(rep) {
                Ok(o) => Some(o),
                Err(e) => {
                    log::warn!("p={} m={} rep {rep} failed: {e}", self.p, self.m);
                    None
                }
            })
            .collect()
    }

    /// MSE rows, one per aggregate configuration.
    fn summarize(&self, outcomes: &[Option<RepOutcome>]) -> Result<Vec<CellResult>> {
        let ok: Vec<&RepOutcome> = outcomes.iter().flatten().collect();
        if ok.is_empty() {
            return Err(Error::NoValidReports);
        }
        let alpha = self.cfg.spike.alpha;
        let mse = |f: &dyn Fn(&RepOutcome) -> f64| ok.iter().map(|o| (f(o) - alpha).powi(2)).sum::<f64>() / ok.len() as f64;
        let mse_pooled = mse(&|o| o.pooled);
        let mse_avg = mse(&|o| o.avg);
        Ok((0..self.aggregates.len())
            .map(|i| CellResult {
                p: self.p,
                m: self.m,
                reps: ok.len(),
                mse_pooled,
                mse_weighted: mse(&|o| o.weighted[i]),
                mse_avg,
                failures: outcomes.len() - ok.len(),
            })
            .collect())
    }
}

fn pooled_from_gram(g: DMatrix<f64>, n: usize, hint: SpikeHint) -> Result<f64> {
    let s = g / n as f64;
    Ok(report_from_covariance(0, n, &s, hint, &ReportOptions::spike_only(), 3.0)?.alpha_hat)
}

/// Spike estimate from all shards together, with `y = p/Σn_ℓ`.
///
/// The pooled covariance is accumulated from per-shard Gram matrices, which
/// equals the covariance of the concatenated columns.
pub fn pooled_estimate(shards: &[LocalDataset], hint: SpikeHint) -> Result<f64> {
    let first = shards.first().ok_or(Error::EmptyInput)?;
    let p = first.p();
    let mut acc = DMatrix::<f64>::zeros(p, p);
    for s in shards {
        if s.p() != p {
            return Err(Error::LengthMismatch(p, s.p()));
        }
        acc += gram(s);
    }
    let n = shards.iter().map(LocalDataset::n).sum();
    if n <= p {
        return Err(Error::InvalidShape(format!("pooled sample size {n} does not exceed p = {p}")));
    }
    pooled_from_gram(acc, n, hint)
}

/// The shards replication `rep` of cell `(p, m)` evaluates.
pub fn draw_shards(cfg: &ExperimentConfig, p: usize, m: usize, rep: usize) -> Result<Vec<LocalDataset>> {
    cfg.validate()?;
    Cell::new(cfg, p, m, &[])?.shards(rep)
}

/// One replication of a single cell, exposed for inspection and tests.
pub fn replicate_cell(cfg: &ExperimentConfig, p: usize, m: usize, rep: usize) -> Result<RepOutcome> {
    cfg.validate()?;
    Cell::new(cfg, p, m, &[cfg.grid_initial()])?.replicate(rep)
}

/// MSE table over the `p × m` grid.
pub fn run_mse_grid(cfg: &ExperimentConfig) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &p in &cfg.p_grid {
        for &m in &cfg.m_grid {
            let cell = Cell::new(cfg, p, m, &[cfg.grid_initial()])?;
            rows.extend(cell.summarize(&cell.run())?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Machines,
    Dimension,
}

/// CSV rows are flat: the label column followed by the cell columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub sweep: SweepAxis,
    pub cell: CellResult,
}

fn serialize_labeled<S: serde::Serializer, L: Serialize + ?Sized>(
    serializer: S,
    name: &'static str,
    label_key: &'static str,
    label: &L,
    c: &CellResult,
) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeStruct;
    let mut st = serializer.serialize_struct(name, 8)?;
    st.serialize_field(label_key, label)?;
    st.serialize_field("p", &c.p)?;
    st.serialize_field("m", &c.m)?;
    st.serialize_field("reps", &c.reps)?;
    st.serialize_field("mse_pooled", &c.mse_pooled)?;
    st.serialize_field("mse_weighted", &c.mse_weighted)?;
    st.serialize_field("mse_avg", &c.mse_avg)?;
    st.serialize_field("failures", &c.failures)?;
    st.end()
}

impl Serialize for SweepRecord {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serialize_labeled(serializer, "SweepRecord", "sweep", &self.sweep, &self.cell)
    }
}

/// Machine sweep at the first `p`, then dimension sweep at the first `m`.
pub fn run_sweeps(cfg: &ExperimentConfig) -> Result<Vec<SweepRecord>> {
    cfg.validate()?;
    let (p0, m0) = (cfg.p_grid[0], cfg.m_grid[0]);
    let mut out = Vec::new();
    for (axis, cells) in [
        (SweepAxis::Machines, cfg.m_grid.iter().map(|&m| (p0, m)).collect::<Vec<_>>()),
        (SweepAxis::Dimension, cfg.p_grid.iter().map(|&p| (p, m0)).collect()),
    ] {
        for (p, m) in cells {
            let cell = Cell::new(cfg, p, m, &[cfg.grid_initial()])?;
            for row in cell.summarize(&cell.run())? {
                out.push(SweepRecord { sweep: axis, cell: row });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialRecord {
    pub strategy: String,
    pub cell: CellResult,
}

impl Serialize for InitialRecord {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serialize_labeled(serializer, "InitialRecord", "strategy", self.strategy.as_str(), &self.cell)
    }
}

fn strategy_name(s: &InitialStrategy) -> &'static str {
    match s {
        InitialStrategy::FirstMachine => "first_machine",
        InitialStrategy::WorstMachine { .. } => "worst_machine",
        InitialStrategy::MeanOfLocals => "mean_of_locals",
    }
}

/// Every pilot strategy on identical replication streams, at the first grid cell.
pub fn run_initials(cfg: &ExperimentConfig) -> Result<Vec<InitialRecord>> {
    cfg.validate()?;
    let strategies = if cfg.initial_strategies.is_empty() {
        vec![
            InitialStrategy::FirstMachine,
            InitialStrategy::WorstMachine { truth: cfg.spike.alpha },
            InitialStrategy::MeanOfLocals,
        ]
    } else {
        cfg.initial_strategies.clone()
    };
    let cell = Cell::new(cfg, cfg.p_grid[0], cfg.m_grid[0], &strategies)?;
    Ok(strategies
        .iter()
        .zip(cell.summarize(&cell.run())?)
        .map(|(s, row)| InitialRecord {
            strategy: strategy_name(s).to_string(),
            cell: row,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalityResult {
    pub z: Vec<f64>,
    pub bins: Vec<Bin>,
    pub ks: f64,
    pub mean: f64,
    pub failures: usize,
}

pub const NORMALITY_MIN_REPS: usize = 300;

/// Standardized errors of the weighted estimator at the first grid cell.
pub fn run_normality(cfg: &ExperimentConfig) -> Result<NormalityResult> {
    cfg.validate()?;
    if cfg.reps < NORMALITY_MIN_REPS {
        return Err(Error::Config(format!("normality study needs at least {NORMALITY_MIN_REPS} reps")));
    }
    let cell = Cell::new(cfg, cfg.p_grid[0], cfg.m_grid[0], &[cfg.grid_initial()])?;
    let outcomes = cell.run();
    let z: Vec<f64> = outcomes.iter().flatten().filter_map(|o| o.z[0]).collect();
    if z.is_empty() {
        return Err(Error::NoValidReports);
    }
    let mean = stats::mean(&z);
    if z.iter().all(|&v| v == z[0]) {
        return Err(Error::InvalidParameter("standardized statistics have zero variance".into()));
    }
    Ok(NormalityResult {
        bins: stats::histogram(&z, -4.0, 4.0, 32),
        ks: stats::ks_standard_normal(&z)?,
        mean,
        failures: outcomes.len() - z.len(),
        z,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n_total: usize,
    pub mse_pooled: f64,
    pub mse_weighted: f64,
    pub mse_avg: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateResult {
    pub points: Vec<RatePoint>,
    /// Slope of `log MSE_weighted` on `log n_total`.
    pub slope: f64,
}

/// OLS slope of `log mse` on `log n`.
pub fn fit_rate(n_totals: &[usize], mses: &[f64]) -> Result<f64> {
    if n_totals.len() != mses.len() {
        return Err(Error::LengthMismatch(n_totals.len(), mses.len()));
    }
    if n_totals.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            got: n_totals.len(),
        });
    }
    if mses.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidParameter("MSEs must be positive".into()));
    }
    let xs: Vec<f64> = n_totals.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = mses.iter().map(|v| v.ln()).collect();
    let slope = stats::ols_slope(&xs, &ys)?;
    if slope == 0.0 {
        log::warn!("rate fit is flat: slope 0");
    }
    Ok(slope)
}

fn equal_sizes(n_total: usize, m: usize) -> Vec<usize> {
    (0..m).map(|i| n_total / m + usize::from(i < n_total % m)).collect()
}

/// Weighted MSE against total sample size at the first grid cell, equal shards.
pub fn rate_check(cfg: &ExperimentConfig) -> Result<RateResult> {
    cfg.validate()?;
    if cfg.n_totals.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            got: cfg.n_totals.len(),
        });
    }
    let (p, m) = (cfg.p_grid[0], cfg.m_grid[0]);
    let mut points = Vec::with_capacity(cfg.n_totals.len());
    for &n_total in &cfg.n_totals {
        let mut cell = Cell::new(cfg, p, m, &[cfg.grid_initial()])?;
        cell.n_total = n_total;
        cell.partition = PartitionRule::Fixed(equal_sizes(n_total, m));
        let row = cell.summarize(&cell.run())?.remove(0);
        points.push(RatePoint {
            n_total,
            mse_pooled: row.mse_pooled,
            mse_weighted: row.mse_weighted,
            mse_avg: row.mse_avg,
            failures: row.failures,
        });
    }
    let slope = fit_rate(&cfg.n_totals, &points.iter().map(|pt| pt.mse_weighted).collect::<Vec<_>>())?;
    Ok(RateResult { points, slope })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// `<stem>_z.csv` (one z per line) and `<stem>_bins.csv` (`lo,hi,count`).
pub fn write_normality(path: &Path, result: &NormalityResult) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let stem = path.with_extension("");
    let z_path = stem.with_file_name(format!("{}_z.csv", file_stem(&stem)));
    let bins_path = stem.with_file_name(format!("{}_bins.csv", file_stem(&stem)));
    #[derive(Serialize)]
    struct Z {
        z: f64,
    }
    #[derive(Serialize)]
    struct B {
        lo: f64,
        hi: f64,
        count: usize,
    }
    write_csv(&z_path, &result.z.iter().map(|&z| Z { z }).collect::<Vec<_>>())?;
    write_csv(
        &bins_path,
        &result.bins.iter().map(|b| B { lo: b.lo, hi: b.hi, count: b.count }).collect::<Vec<_>>(),
    )?;
    Ok((z_path, bins_path))
}

fn file_stem(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "normality".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localnode::{local_report, ReportOptions};
    use approx::assert_relative_eq;

    fn upper(p: usize, m: usize, reps: usize) -> ExperimentConfig {
        ExperimentConfig {
            reps,
            master_seed: 11,
            ..ExperimentConfig::new(
                p,
                m,
                SpikeSpec {
                    alpha: 10.0,
                    side: SpikeSide::Upper,
                },
            )
        }
    }

    #[test]
    fn config_validation() {
        assert!(upper(20, 4, 5).validate().is_ok());
        assert!(matches!(upper(20, 4, 0).validate(), Err(Error::Config(_))));
        let mut c = upper(20, 4, 5);
        c.m_grid.clear();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(matches!(upper(500, 4, 5).validate(), Err(Error::Config(_))));
        let mut c = upper(500, 4, 5);
        c.full_scale = true;
        assert!(c.validate().is_ok());
        let mut c = upper(20, 4, 5);
        c.spike.side = SpikeSide::Lower;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_json() {
        let c = ExperimentConfig::from_json(
            r#"{"p_grid":[30],"m_grid":[5],"spike":{"alpha":0.01,"side":"lower"},"reps":4,"master_seed":3}"#,
        )
        .unwrap();
        assert_eq!(c.reps, 4);
        assert_eq!(c.partition, PartitionRule::default());
        assert!(matches!(ExperimentConfig::from_json(r#"{"p_grid":[30]}"#), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"p_grid":[30],"m_grid":[5],"spike":{"alpha":10,"side":"upper"},"bogus":1}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pooled_single_shard_equals_local() {
        let cfg = upper(20, 1, 1);
        let pop = cfg.population(20).unwrap();
        let data = pop.sample(150, 4, 0).unwrap();
        let local = local_report(&data, SpikeHint::largest(), &ReportOptions::spike_only(), None).unwrap();
        assert_eq!(pooled_estimate(std::slice::from_ref(&data), SpikeHint::largest()).unwrap(), local.alpha_hat);
    }

    #[test]
    fn pooled_uses_total_ratio() {
        let cfg = upper(20, 2, 1);
        let pop = cfg.population(20).unwrap();
        let a = pop.sample(60, 1, 0).unwrap();
        let b = pop.sample(90, 1, 1).unwrap();
        let joined = LocalDataset::new(0, {
            let mut m = DMatrix::zeros(20, 150);
            m.columns_mut(0, 60).copy_from(&a.observations);
            m.columns_mut(60, 90).copy_from(&b.observations);
            m
        })
        .unwrap();
        let direct = local_report(&joined, SpikeHint::largest(), &ReportOptions::spike_only(), None).unwrap();
        assert_relative_eq!(direct.y, 20.0 / 150.0);
        assert_relative_eq!(pooled_estimate(&[a, b], SpikeHint::largest()).unwrap(), direct.alpha_hat, max_relative = 1e-12);
    }

    #[test]
    fn single_machine_estimators_coincide() {
        let out = replicate_cell(&upper(20, 1, 1), 20, 1, 0).unwrap();
        assert_eq!(out.pooled, out.weighted[0]);
        assert_eq!(out.pooled, out.avg);
    }

    #[test]
    fn grid_is_deterministic() {
        let cfg = upper(20, 3, 1);
        assert_eq!(run_mse_grid(&cfg).unwrap(), run_mse_grid(&cfg).unwrap());
        let cfg = upper(20, 3, 6);
        let a = run_mse_grid(&cfg).unwrap();
        assert_eq!(a, run_mse_grid(&cfg).unwrap());
        assert_eq!(a[0].reps + a[0].failures, 6);
        assert!(a[0].mse_pooled >= 0.0 && a[0].mse_weighted >= 0.0 && a[0].mse_avg >= 0.0);
    }

    #[test]
    fn initials_share_streams() {
        let rows = run_initials(&upper(20, 4, 5)).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.cell.mse_pooled == rows[0].cell.mse_pooled));
        assert!(rows.iter().all(|r| r.cell.mse_avg == rows[0].cell.mse_avg));
    }

    #[test]
    fn sweep_shapes() {
        let mut cfg = upper(20, 2, 2);
        cfg.m_grid = vec![2, 3];
        cfg.p_grid = vec![20, 10];
        let recs = run_sweeps(&cfg).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs.iter().filter(|r| r.sweep == SweepAxis::Machines).count(), 2);
        assert_eq!((recs[3].cell.p, recs[3].cell.m), (10, 2));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(&recs[0]).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert!(text.starts_with("sweep,p,m,reps,mse_pooled,mse_weighted,mse_avg,failures\nmachines,20,2,"));
    }

    #[test]
    fn rate_fit_identities() {
        let ns = [1000, 4000, 16000];
        let mses: Vec<f64> = ns.iter().map(|&n| 3.7 / n as f64).collect();
        assert_relative_eq!(fit_rate(&ns, &mses).unwrap(), -1.0, epsilon = 1e-12);
        assert_eq!(fit_rate(&[5, 5, 5], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(fit_rate(&ns, &[0.1, 0.1, 0.1]).unwrap(), 0.0);
        assert!(matches!(fit_rate(&ns[..2], &mses[..2]), Err(Error::InsufficientPoints { needed: 3, got: 2 })));
        let mut cfg = upper(20, 2, 2);
        cfg.n_totals = vec![100, 200];
        assert!(matches!(rate_check(&cfg), Err(Error::InsufficientPoints { .. })));
    }

    #[test]
    fn equal_split() {
        assert_eq!(equal_sizes(10, 3), vec![4, 3, 3]);
        assert_eq!(equal_sizes(4000, 20).iter().sum::<usize>(), 4000);
    }

    #[test]
    fn normality_needs_reps() {
        assert!(matches!(run_normality(&upper(20, 2, 10)), Err(Error::Config(_))));
    }
}
