//! Coordinator-side combination of local spike estimates.
//!
//! Local estimates are combined as `α̃ = Σ ω_ℓ α̂_ℓ` with `Σ ω_ℓ = 1`. The
//! weights minimizing the limiting mean square error are inverse-variance
//! weights `ω_ℓ ∝ n_ℓ/σ_ℓ²`, giving the limit `1/Σ n_ℓ/σ_ℓ²`. The variances
//! depend on the unknown spike, so they are evaluated at a pilot value `ᾱ`
//! computed from the local estimates themselves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localnode::LocalEstimate;
use crate::spectrum::{clt_variance, gaussian_variance, AspectRatio};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleTruth {
    pub alpha: f64,
    pub gamma4: f64,
    pub u4sum: f64,
}

/// How the coordinator weights the local estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Inverse-variance weights from the true parameters (experiments only).
    OptimalOracle(OracleTruth),
    /// Inverse-variance weights from each worker's nuisance estimates.
    EstimatedGeneral,
    /// `ω_ℓ ∝ n_ℓ(ᾱ-1)² - p`, the Gaussian diagonal-covariance special case.
    #[default]
    GaussianClosedForm,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    OptimalOracle,
    EstimatedGeneral,
    GaussianClosedForm,
    Uniform,
}

impl WeightMode {
    pub fn kind(&self) -> WeightKind {
        match self {
            WeightMode::OptimalOracle(_) => WeightKind::OptimalOracle,
            WeightMode::EstimatedGeneral => WeightKind::EstimatedGeneral,
            WeightMode::GaussianClosedForm => WeightKind::GaussianClosedForm,
            WeightMode::Uniform => WeightKind::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub mode: WeightKind,
    /// Set when the requested mode was degenerate and uniform weights were used instead.
    pub fallback_flag: bool,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Compensated sum, so rounding in the check does not grow with `m`.
    pub fn sum(&self) -> f64 {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for &w in &self.weights {
            let t = s + w;
            c += if s.abs() >= w.abs() { (s - t) + w } else { (w - t) + s };
            s = t;
        }
        s + c
    }
}

/// Pilot value `ᾱ` used to evaluate the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialStrategy {
    /// Estimate of the first machine in worker-id order.
    FirstMachine,
    /// The local estimate farthest from the truth. Diagnostic only.
    WorstMachine { truth: f64 },
    #[default]
    MeanOfLocals,
}

pub fn initial_value(reports: &[LocalEstimate], strategy: InitialStrategy) -> Result<f64> {
    let first = reports.first().ok_or(Error::NoValidReports)?;
    let value = match strategy {
        InitialStrategy::FirstMachine => first.alpha_hat,
        InitialStrategy::MeanOfLocals => reports.iter().map(|r| r.alpha_hat).sum::<f64>() / reports.len() as f64,
        InitialStrategy::WorstMachine { truth } => {
            reports
                .iter()
                .map(|r| r.alpha_hat)
                .fold((first.alpha_hat, -1.0), |(best, dev), a| {
                    let d = (a - truth) * (a - truth);
                    if d > dev {
                        (a, d)
                    } else {
                        (best, dev)
                    }
                })
                .0
        }
    };
    if !value.is_finite() {
        return Err(Error::InvalidParameter(format!("initial value {value} is not finite")));
    }
    Ok(value)
}

/// `σ̂_ℓ² = (γ̂₄-3)ᾱ²·Σu⁴-hat + 2ᾱ²(ᾱ-1)²/((ᾱ-1)²-y_ℓ)`.
pub fn sigma_hat(report: &LocalEstimate, alpha_bar: f64) -> Result<f64> {
    let y = AspectRatio::new(report.y)?;
    let gap = (alpha_bar - 1.0) * (alpha_bar - 1.0);
    if !(gap > report.y) {
        return Err(Error::DegenerateVariance { gap, y: report.y });
    }
    let kurtosis_term = if report.gamma4_hat == 3.0 {
        0.0
    } else {
        let u4 = report.u4sum_hat.ok_or_else(|| {
            Error::InvalidParameter(format!(
                "worker {} reports gamma4 {} without a u4 estimate",
                report.worker_id, report.gamma4_hat
            ))
        })?;
        (report.gamma4_hat - 3.0) * alpha_bar * alpha_bar * u4
    };
    let sigma2 = kurtosis_term + gaussian_variance(alpha_bar, y)?.sigma2;
    if !(sigma2 > 0.0) {
        return Err(Error::DegenerateVariance { gap, y: report.y });
    }
    Ok(sigma2)
}

fn check_pairs(ns: &[usize], sigma2s: &[f64]) -> Result<()> {
    if ns.is_empty() {
        return Err(Error::EmptyInput);
    }
    if ns.len() != sigma2s.len() {
        return Err(Error::LengthMismatch(ns.len(), sigma2s.len()));
    }
    if ns.iter().any(|&n| n == 0) || sigma2s.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidParameter("sizes and variances must be positive".into()));
    }
    Ok(())
}

/// `ω_ℓ = (n_ℓ/σ_ℓ²) / Σ_i n_i/σ_i²`.
pub fn optimal_weights(ns: &[usize], sigma2s: &[f64]) -> Result<WeightVector> {
    check_pairs(ns, sigma2s)?;
    let precision: Vec<f64> = ns.iter().zip(sigma2s).map(|(&n, s)| n as f64 / s).collect();
    let total: f64 = precision.iter().sum();
    Ok(WeightVector {
        weights: precision.iter().map(|w| w / total).collect(),
        mode: WeightKind::OptimalOracle,
        fallback_flag: false,
    })
}

pub fn uniform_weights(m: usize) -> WeightVector {
    WeightVector {
        weights: vec![1.0 / m as f64; m],
        mode: WeightKind::Uniform,
        fallback_flag: false,
    }
}

fn fallback(m: usize, reason: &str) -> WeightVector {
    log::warn!("falling back to uniform weights: {reason}");
    WeightVector {
        fallback_flag: true,
        ..uniform_weights(m)
    }
}

/// `ω_ℓ = (n_ℓ(ᾱ-1)² - p) / (n(ᾱ-1)² - mp)`; uniform with `fallback_flag`
/// when any numerator is non-positive.
pub fn gaussian_weights(ns: &[usize], p: usize, alpha_bar: f64) -> Result<WeightVector> {
    if ns.is_empty() {
        return Err(Error::EmptyInput);
    }
    let gap = (alpha_bar - 1.0) * (alpha_bar - 1.0);
    let numerators: Vec<f64> = ns.iter().map(|&n| n as f64 * gap - p as f64).collect();
    if numerators.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Ok(fallback(ns.len(), "some n_l (alpha_bar - 1)^2 <= p"));
    }
    let total: f64 = numerators.iter().sum();
    Ok(WeightVector {
        weights: numerators.iter().map(|w| w / total).collect(),
        mode: WeightKind::GaussianClosedForm,
        fallback_flag: false,
    })
}

/// `α̃ = Σ ω_ℓ α̂_ℓ`.
pub fn combine(reports: &[LocalEstimate], weights: &WeightVector) -> Result<f64> {
    if reports.len() != weights.len() {
        return Err(Error::LengthMismatch(reports.len(), weights.len()));
    }
    if reports.is_empty() {
        return Err(Error::NoValidReports);
    }
    Ok(reports.iter().zip(&weights.weights).map(|(r, w)| w * r.alpha_hat).sum())
}

/// Limiting MSE of the optimally weighted estimator, `1/Σ n_ℓ/σ_ℓ²`.
pub fn mse_limit(ns: &[usize], sigma2s: &[f64]) -> Result<f64> {
    check_pairs(ns, sigma2s)?;
    Ok(1.0 / ns.iter().zip(sigma2s).map(|(&n, s)| n as f64 / s).sum::<f64>())
}

/// `z = (α̃-α)·√(Σ n_ℓ/σ_ℓ²)`, asymptotically standard normal.
pub fn standardized_stat(alpha_tilde: f64, alpha_true: f64, ns: &[usize], sigma2s: &[f64]) -> Result<f64> {
    Ok((alpha_tilde - alpha_true) / mse_limit(ns, sigma2s)?.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct AggregateConfig {
    #[serde(default)]
    pub weight_mode: WeightMode,
    #[serde(default)]
    pub initial: InitialStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub alpha_tilde: f64,
    /// `√(1/Σ n_ℓ/σ̂_ℓ²)` with the variances evaluated at the pilot value;
    /// absent when those variances are degenerate.
    pub stderr_hat: Option<f64>,
    pub weights: WeightVector,
    pub initial_value: f64,
    /// Worker ids that contributed, in the order of `weights`.
    pub included_workers: Vec<usize>,
    pub excluded_workers: Vec<usize>,
}

impl AggregateResult {
    /// Standardized error against a known truth.
    pub fn z_score(&self, alpha_true: f64) -> Option<f64> {
        self.stderr_hat.map(|se| (self.alpha_tilde - alpha_true) / se)
    }
}

fn pilot_variances(reports: &[LocalEstimate], alpha_bar: f64, mode: &WeightMode) -> Result<Vec<f64>> {
    reports
        .iter()
        .map(|r| match mode {
            WeightMode::OptimalOracle(t) => Ok(clt_variance(t.alpha, AspectRatio::new(r.y)?, t.gamma4, t.u4sum)?.sigma2),
            WeightMode::GaussianClosedForm => Ok(gaussian_variance(alpha_bar, AspectRatio::new(r.y)?)?.sigma2),
            WeightMode::EstimatedGeneral | WeightMode::Uniform => sigma_hat(r, alpha_bar),
        })
        .collect()
}

/// One-round weighted estimator: pilot value from the local estimates,
/// weights, then the weighted combination. Flagged or non-finite reports
/// are excluded and the weights renormalized over the survivors.
pub fn run_algorithm1(reports: &[LocalEstimate], p: usize, config: &AggregateConfig) -> Result<AggregateResult> {
    let mut sorted: Vec<&LocalEstimate> = reports.iter().collect();
    sorted.sort_by_key(|r| r.worker_id);
    let (valid, excluded): (Vec<&LocalEstimate>, Vec<&LocalEstimate>) = sorted
        .into_iter()
        .partition(|r| !r.boundary_flag && r.alpha_hat.is_finite());
    let valid: Vec<LocalEstimate> = valid.into_iter().cloned().collect();
    let excluded_workers: Vec<usize> = excluded.iter().map(|r| r.worker_id).collect();
    if valid.is_empty() {
        return Err(Error::NoValidReports);
    }
    for r in &excluded {
        log::warn!("excluding worker {}: estimate on the bulk edge or non-finite", r.worker_id);
    }

    let alpha_bar = initial_value(&valid, config.initial)?;
    let ns: Vec<usize> = valid.iter().map(|r| r.n).collect();
    let sigma2s = pilot_variances(&valid, alpha_bar, &config.weight_mode);

    let weights = match (&config.weight_mode, &sigma2s) {
        (WeightMode::Uniform, _) => uniform_weights(valid.len()),
        (WeightMode::GaussianClosedForm, _) => gaussian_weights(&ns, p, alpha_bar)?,
        (mode, Ok(s)) => WeightVector {
            mode: mode.kind(),
            ..optimal_weights(&ns, s)?
        },
        (_, Err(e)) => fallback(valid.len(), &e.to_string()),
    };
    let alpha_tilde = combine(&valid, &weights)?;
    let stderr_hat = sigma2s.ok().and_then(|s| mse_limit(&ns, &s).ok()).map(f64::sqrt);

    Ok(AggregateResult {
        alpha_tilde,
        stderr_hat,
        weights,
        initial_value: alpha_bar,
        included_workers: valid.iter().map(|r| r.worker_id).collect(),
        excluded_workers,
    })
}
