//! Synthetic data for the spiked population model and shard-size plans.
//!
//! Observations are `V·x` with `x` having i.i.d. standardized entries and
//! `V = U·diag(√α_1, …, √α_M, 1, …, 1)·Uᵀ`. Taking the same orthogonal
//! factor on both sides keeps `V` symmetric.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EntryDistribution {
    #[default]
    Gaussian,
    /// ±1 with equal probability.
    Rademacher,
    /// Uniform on `(-√3, √3)`.
    UniformScaled,
}

impl EntryDistribution {
    /// Analytic fourth moment `E x⁴`.
    pub fn gamma4_true(self) -> f64 {
        match self {
            EntryDistribution::Gaussian => 3.0,
            EntryDistribution::Rademacher => 1.0,
            EntryDistribution::UniformScaled => 1.8,
        }
    }

    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        const SQRT3: f64 = 1.732_050_807_568_877_2;
        match self {
            EntryDistribution::Gaussian => rng.sample(StandardNormal),
            EntryDistribution::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            EntryDistribution::UniformScaled => rng.random_range(-SQRT3..SQRT3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rotation {
    #[default]
    Identity,
    /// Haar-distributed orthogonal factor drawn from the given seed.
    RandomOrthogonal(u64),
}

/// Population description. Spikes occupy the leading coordinates of the
/// unrotated frame, in the order given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikedModel {
    pub p: usize,
    pub spikes: Vec<f64>,
    #[serde(default)]
    pub entry_dist: EntryDistribution,
    #[serde(default)]
    pub rotation: Rotation,
}

impl SpikedModel {
    pub fn new(p: usize, spikes: Vec<f64>, entry_dist: EntryDistribution, rotation: Rotation) -> Result<Self> {
        let model = SpikedModel {
            p,
            spikes,
            entry_dist,
            rotation,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidModel("dimension must be positive".into()));
        }
        if self.spikes.len() > self.p {
            return Err(Error::InvalidModel(format!(
                "{} spikes exceed dimension {}",
                self.spikes.len(),
                self.p
            )));
        }
        if self.spikes.iter().any(|&a| !(a.is_finite() && a > 0.0 && a != 1.0)) {
            return Err(Error::InvalidModel("spikes must be positive, finite and different from 1".into()));
        }
        if self.spikes.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidModel("spikes must be strictly decreasing".into()));
        }
        Ok(())
    }

    /// Number of spikes above one (`M_b`).
    pub fn upper_count(&self) -> usize {
        self.spikes.iter().filter(|&&a| a > 1.0).count()
    }

    /// Number of spikes below one (`M_a`).
    pub fn lower_count(&self) -> usize {
        self.spikes.len() - self.upper_count()
    }
}

/// Symmetric square root `V` of the population covariance, with its inverse.
#[derive(Debug, Clone)]
pub struct CovarianceRoot {
    scales: DVector<f64>,
    /// `None` for the identity rotation, where `V` is diagonal.
    dense: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl CovarianceRoot {
    pub fn build(model: &SpikedModel) -> Result<Self> {
        model.validate()?;
        let p = model.p;
        let scales = DVector::from_fn(p, |i, _| model.spikes.get(i).map_or(1.0, |a| a.sqrt()));
        let dense = match model.rotation {
            Rotation::Identity => None,
            Rotation::RandomOrthogonal(s) => {
                let u = haar_orthogonal(p, s);
                let v = &u * DMatrix::from_diagonal(&scales) * u.transpose();
                let v_inv = &u * DMatrix::from_diagonal(&scales.map(|s| 1.0 / s)) * u.transpose();
                Some((symmetrize(v), symmetrize(v_inv)))
            }
        };
        Ok(CovarianceRoot { scales, dense })
    }

    pub fn dim(&self) -> usize {
        self.scales.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        match &self.dense {
            None => DMatrix::from_diagonal(&self.scales),
            Some((v, _)) => v.clone(),
        }
    }

    /// `V·x` for a `p × n` block of raw entries.
    pub fn apply(&self, mut x: DMatrix<f64>) -> DMatrix<f64> {
        match &self.dense {
            None => {
                for (i, s) in self.scales.iter().enumerate() {
                    if *s != 1.0 {
                        x.row_mut(i).scale_mut(*s);
                    }
                }
                x
            }
            Some((v, _)) => v * x,
        }
    }

    /// `V⁻¹·y`, recovering the raw entries from observations.
    pub fn whiten(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.dense {
            None => {
                let mut x = y.clone();
                for (i, s) in self.scales.iter().enumerate() {
                    if *s != 1.0 {
                        x.row_mut(i).scale_mut(1.0 / s);
                    }
                }
                x
            }
            Some((_, v_inv)) => v_inv * y,
        }
    }
}

fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    m
}

/// Orthonormalize a seeded Gaussian matrix; fixing the signs of `R`'s
/// diagonal makes the result Haar distributed.
fn haar_orthogonal(p: usize, seed_value: u64) -> DMatrix<f64> {
    let mut rng = seed::rng(seed_value, &[tag::ROTATION]);
    let g = DMatrix::from_vec(p, p, (0..p * p).map(|_| rng.sample(StandardNormal)).collect());
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `V = L·diag(A_M^{1/2}, I)·Uᵀ` with `L = U`.
pub fn build_covariance_root(model: &SpikedModel) -> Result<DMatrix<f64>> {
    Ok(CovarianceRoot::build(model)?.matrix())
}

/// One machine's observations: `p` rows, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    pub worker_id: usize,
    pub observations: DMatrix<f64>,
}

impl LocalDataset {
    pub fn new(worker_id: usize, observations: DMatrix<f64>) -> Result<Self> {
        if observations.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidShape("observations contain non-finite entries".into()));
        }
        Ok(LocalDataset {
            worker_id,
            observations,
        })
    }

    pub fn p(&self) -> usize {
        self.observations.nrows()
    }

    pub fn n(&self) -> usize {
        self.observations.ncols()
    }

    /// Dump as CSV: one line per coordinate, one field per observation.
    /// Values are written in shortest round-trip form.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        let mut line = String::new();
        for row in self.observations.row_iter() {
            line.clear();
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    line.push(',');
                }
                line.push_str(&format!("{v:?}"));
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, worker_id: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::MalformedCsv(e.to_string()))?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (r, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::MalformedCsv(e.to_string()))?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    s.trim().parse::<f64>().map_err(|_| Error::NonNumericCell {
                        row: r + 1,
                        col: c + 1,
                        value: s.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::EmptyFile);
        }
        let n = rows[0].len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::MalformedCsv("ragged rows".into()));
        }
        let p = rows.len();
        let obs = DMatrix::from_fn(p, n, |i, j| rows[i][j]);
        LocalDataset::new(worker_id, obs)
    }
}

/// A validated model with its covariance root, ready for repeated sampling.
#[derive(Debug, Clone)]
pub struct Population {
    pub model: SpikedModel,
    pub root: CovarianceRoot,
}

impl Population {
    pub fn new(model: SpikedModel) -> Result<Self> {
        let root = CovarianceRoot::build(&model)?;
        Ok(Population { model, root })
    }

    /// Raw `p × n` standardized entries from the stream `(seed, worker_id)`.
    pub fn raw_entries(&self, n: usize, seed_value: u64, worker_id: usize) -> DMatrix<f64> {
        let p = self.model.p;
        let dist = self.model.entry_dist;
        let mut rng = seed::rng(seed_value, &[tag::WORKER, worker_id as u64]);
        DMatrix::from_vec(p, n, (0..p * n).map(|_| dist.draw(&mut rng)).collect())
    }

    pub fn sample(&self, n: usize, seed_value: u64, worker_id: usize) -> Result<LocalDataset> {
        if n <= self.model.p {
            return Err(Error::InvalidShape(format!(
                "shard needs more than p = {} observations, got {n}",
                self.model.p
            )));
        }
        let x = self.raw_entries(n, seed_value, worker_id);
        Ok(LocalDataset {
            worker_id,
            observations: self.root.apply(x),
        })
    }
}

pub fn sample_local(model: &SpikedModel, n: usize, seed_value: u64, worker_id: usize) -> Result<LocalDataset> {
    Population::new(model.clone())?.sample(n, seed_value, worker_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionRule {
    Fixed(Vec<usize>),
    /// Each shard size drawn uniformly from `{⌈lo·p⌉, …, ⌊hi·p⌋}`.
    UniformRange { lo_mult: f64, hi_mult: f64 },
}

impl Default for PartitionRule {
    fn default() -> Self {
        PartitionRule::UniformRange {
            lo_mult: 2.0,
            hi_mult: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub sizes: Vec<usize>,
    pub rule: PartitionRule,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }
}

pub fn make_partition(p: usize, m: usize, rule: &PartitionRule, seed_value: u64) -> Result<PartitionPlan> {
    if m == 0 {
        return Err(Error::InvalidRule("need at least one machine".into()));
    }
    let sizes = match rule {
        PartitionRule::Fixed(sizes) => {
            if sizes.len() != m {
                return Err(Error::InvalidRule(format!("{} fixed sizes for {m} machines", sizes.len())));
            }
            if let Some(bad) = sizes.iter().find(|&&n| n <= p) {
                return Err(Error::InvalidRule(format!("shard size {bad} does not exceed p = {p}")));
            }
            sizes.clone()
        }
        &PartitionRule::UniformRange { lo_mult, hi_mult } => {
            if !(lo_mult > 1.0) || !(hi_mult >= lo_mult) || !hi_mult.is_finite() {
                return Err(Error::InvalidRule(format!(
                    "need 1 < lo_mult <= hi_mult, got ({lo_mult}, {hi_mult})"
                )));
            }
            let lo = (lo_mult * p as f64).ceil() as usize;
            let hi = (hi_mult * p as f64).floor() as usize;
            let lo = lo.max(p + 1);
            if hi < lo {
                return Err(Error::InvalidRule(format!("empty size range [{lo}, {hi}]")));
            }
            let mut rng = seed::rng(seed_value, &[tag::PARTITION]);
            (0..m).map(|_| rng.random_range(lo..=hi)).collect()
        }
    };
    Ok(PartitionPlan {
        sizes,
        rule: rule.clone(),
        seed: seed_value,
    })
}
