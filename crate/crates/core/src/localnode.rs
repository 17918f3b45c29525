//! Per-machine computations: sample covariance, its spectrum, the local spike
//! estimate and the nuisance estimates needed for variance-based weighting.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{CovarianceRoot, LocalDataset};
use crate::spectrum::{psi_inverse, AspectRatio, SpikeSide};

/// Unnormalized Gram matrix `Y·Yᵀ`, made exactly symmetric.
pub fn gram(data: &LocalDataset) -> DMatrix<f64> {
    let y = &data.observations;
    let mut g = y * y.transpose();
    mirror_upper(&mut g);
    g
}

fn mirror_upper(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// `S = (1/n)·Y·Yᵀ`.
pub fn sample_covariance(data: &LocalDataset) -> DMatrix<f64> {
    gram(data) / data.n() as f64
}

#[derive(Debug, Clone)]
pub struct SpectralSummary {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Column `t` is the unit eigenvector for `eigenvalues[t]`; `None` when
    /// only the eigenvalues were computed.
    pub eigenvectors: Option<DMatrix<f64>>,
    pub y: AspectRatio,
}

impl SpectralSummary {
    pub fn p(&self) -> usize {
        self.eigenvalues.len()
    }
}

fn check_square_finite(s: &DMatrix<f64>) -> Result<()> {
    if !s.is_square() {
        return Err(Error::InvalidShape(format!("{}x{} matrix is not square", s.nrows(), s.ncols())));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidShape("matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Full symmetric eigendecomposition, sorted descending, with each
/// eigenvector's first non-negligible coordinate made positive.
pub fn spectral_decompose(s: &DMatrix<f64>, y: AspectRatio) -> Result<SpectralSummary> {
    check_square_finite(s)?;
    let p = s.nrows();
    let eig = SymmetricEigen::try_new(s.clone(), f64::EPSILON, 1000 * p.max(1)).ok_or(Error::NoConvergence)?;
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(dst, &col);
    }
    Ok(SpectralSummary {
        eigenvalues,
        eigenvectors: Some(vectors),
        y,
    })
}

/// Eigenvalues only, descending.
pub fn spectral_values(s: &DMatrix<f64>, y: AspectRatio) -> Result<SpectralSummary> {
    check_square_finite(s)?;
    let mut eigenvalues: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    Ok(SpectralSummary {
        eigenvalues,
        eigenvectors: None,
        y,
    })
}

/// Which spike a worker estimates. `k` follows the model's 1-based spike
/// numbering (`1..=M_b` above the bulk, `M-M_a+1..=M` below it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeHint {
    pub k: usize,
    pub side: SpikeSide,
    pub m_total: usize,
}

impl SpikeHint {
    pub fn largest() -> Self {
        SpikeHint {
            k: 1,
            side: SpikeSide::Upper,
            m_total: 1,
        }
    }

    pub fn smallest() -> Self {
        SpikeHint {
            k: 1,
            side: SpikeSide::Lower,
            m_total: 1,
        }
    }

    /// 1-based index of the tracking sample eigenvalue.
    pub fn eigen_index(&self, p: usize) -> Result<usize> {
        if self.k == 0 || self.k > self.m_total || self.m_total > p {
            return Err(Error::InvalidParameter(format!(
                "spike index {} invalid for M = {} in dimension {p}",
                self.k, self.m_total
            )));
        }
        Ok(self.side.eigen_index(self.k, self.m_total, p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeLocation {
    pub alpha_hat: f64,
    /// 1-based.
    pub j: usize,
    pub boundary: bool,
}

pub fn estimate_spike(summary: &SpectralSummary, hint: SpikeHint) -> Result<SpikeLocation> {
    let j = hint.eigen_index(summary.p())?;
    let est = psi_inverse(summary.eigenvalues[j - 1], summary.y, hint.side)?;
    Ok(SpikeLocation {
        alpha_hat: est.alpha,
        j,
        boundary: est.boundary,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecularRoots {
    /// Descending; `roots[j]` lies between eigenvalues `j+1` and `j` (0-based),
    /// the last one in `(0, λ_p)`.
    pub roots: Vec<f64>,
}

/// `(1/p)·Σ λ_k/(λ_k - x) - 1/y`.
pub fn secular_function(eigenvalues: &[f64], y: f64, x: f64) -> f64 {
    let p = eigenvalues.len() as f64;
    eigenvalues.iter().map(|&l| l / (l - x)).sum::<f64>() / p - 1.0 / y
}

const TIE_TOL: f64 = 1e-12;
const BRACKET_SHRINK: f64 = 1e-14;
const MAX_BISECTIONS: usize = 200;

/// Solutions of `(1/p)·Σ λ_k/(λ_k - x) = 1/y`, one per gap between
/// consecutive eigenvalues plus one in `(0, λ_p)`.
///
/// The function is strictly increasing between poles, running from `-∞` to
/// `+∞` on each gap (and from `1 - 1/y < 0` at zero), so bisection on each
/// bracket always converges.
pub fn secular_roots(eigenvalues: &[f64], y: AspectRatio) -> Result<SecularRoots> {
    let p = eigenvalues.len();
    if p == 0 {
        return Err(Error::EmptyInput);
    }
    if eigenvalues.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
        return Err(Error::InvalidParameter("eigenvalues must be positive and finite".into()));
    }
    for w in eigenvalues.windows(2) {
        if w[0] < w[1] {
            return Err(Error::InvalidParameter("eigenvalues must be sorted descending".into()));
        }
        if w[0] - w[1] <= TIE_TOL * w[0].max(1.0) {
            return Err(Error::RepeatedEigenvalues(w[0], w[1]));
        }
    }
    let y = y.get();
    let f = |x: f64| secular_function(eigenvalues, y, x);
    let roots = (0..p)
        .map(|j| {
            let hi = eigenvalues[j];
            let lo = if j + 1 < p { eigenvalues[j + 1] } else { 0.0 };
            let shrink = BRACKET_SHRINK * (hi - lo);
            let (mut a, mut b) = (lo + shrink, hi - shrink);
            for _ in 0..MAX_BISECTIONS {
                let mid = 0.5 * (a + b);
                if mid <= a || mid >= b {
                    break;
                }
                if f(mid) < 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            if f(a).abs() <= f(b).abs() {
                a
            } else {
                b
            }
        })
        .collect();
    Ok(SecularRoots { roots })
}

/// Which secular root enters the cross terms `λ_k/(λ_t-λ_k) - v/(λ_t-v)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RootChoice {
    /// `v = v_k`, the root paired with the spike's own eigenvalue.
    #[default]
    SpikeRoot,
    /// `v = v_t`, the root paired with the summation index.
    TermRoot,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct U4Estimate {
    /// Clamped to `[0, 1]`.
    pub value: f64,
    pub raw: f64,
}

/// Quotient with `0/0 := 0`.
#[inline]
fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 && den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Consistent estimate of `Σ_t u_kt⁴` for the population eigenvector tracked
/// by the 1-based sample eigen index `j`.
///
/// The diagonal of `Σ_t θ(t)·û_t·û_tᵀ` estimates `u_k∘u_k`; its squared norm
/// estimates the fourth-power sum. With `k` the spike's eigen index:
///
/// ```text
/// θ(k) = 1 + Σ_{i≠k} [λ_i/(λ_k-λ_i) - v_i/(λ_k-v_i)]
/// θ(t) = -[λ_k/(λ_t-λ_k) - v/(λ_t-v)]          t ≠ k
/// ```
pub fn u4_estimate(summary: &SpectralSummary, j: usize, choice: RootChoice) -> Result<U4Estimate> {
    let vectors = summary.eigenvectors.as_ref().ok_or(Error::EigenvectorsUnavailable)?;
    let p = summary.p();
    if j == 0 || j > p {
        return Err(Error::InvalidParameter(format!("eigen index {j} outside 1..={p}")));
    }
    let lam = &summary.eigenvalues;
    let v = secular_roots(lam, summary.y)?.roots;
    let k = j - 1;
    let theta: Vec<f64> = (0..p)
        .map(|t| {
            if t == k {
                1.0 + (0..p)
                    .filter(|&i| i != k)
                    .map(|i| ratio(lam[i], lam[k] - lam[i]) - ratio(v[i], lam[k] - v[i]))
                    .sum::<f64>()
            } else {
                let vi = match choice {
                    RootChoice::SpikeRoot => v[k],
                    RootChoice::TermRoot => v[t],
                };
                -(ratio(lam[k], lam[t] - lam[k]) - ratio(vi, lam[t] - vi))
            }
        })
        .collect();
    let raw: f64 = vectors
        .row_iter()
        .map(|row| {
            let d: f64 = row.iter().zip(&theta).map(|(u, th)| th * u * u).sum();
            d * d
        })
        .sum();
    Ok(U4Estimate {
        value: raw.clamp(0.0, 1.0),
        raw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Gamma4Mode {
    /// Report the Gaussian value 3.
    #[default]
    GaussianAssumption,
    /// Mean fourth power of the whitened entries `V⁻¹·y`.
    EmpiricalWhitened,
}

pub fn gamma4_estimate(data: &LocalDataset, mode: Gamma4Mode, root: Option<&CovarianceRoot>) -> Result<f64> {
    match mode {
        Gamma4Mode::GaussianAssumption => Ok(3.0),
        Gamma4Mode::EmpiricalWhitened => {
            let root = root.ok_or(Error::WhiteningUnavailable)?;
            if root.dim() != data.p() {
                return Err(Error::LengthMismatch(root.dim(), data.p()));
            }
            Ok(gamma4_from_entries(root.whiten(&data.observations).as_slice()))
        }
    }
}

/// Mean fourth power of raw standardized entries.
pub fn gamma4_from_entries(entries: &[f64]) -> f64 {
    entries.iter().map(|x| (x * x) * (x * x)).sum::<f64>() / entries.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub gamma4_mode: Gamma4Mode,
    /// Skipping the eigenvector estimate leaves `u4sum_hat` empty; the
    /// Gaussian-weight path does not need it.
    pub estimate_u4: bool,
    pub root_choice: RootChoice,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            gamma4_mode: Gamma4Mode::GaussianAssumption,
            estimate_u4: true,
            root_choice: RootChoice::SpikeRoot,
        }
    }
}

impl ReportOptions {
    /// Spike estimate only; the configuration the Monte Carlo harness runs.
    pub fn spike_only() -> Self {
        ReportOptions {
            estimate_u4: false,
            ..Default::default()
        }
    }
}

/// Everything one machine sends to the coordinator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEstimate {
    pub worker_id: usize,
    pub n: usize,
    pub y: f64,
    pub k: usize,
    pub j: usize,
    pub alpha_hat: f64,
    pub gamma4_hat: f64,
    pub u4sum_hat: Option<f64>,
    pub boundary_flag: bool,
}

/// Spike and nuisance estimates from a precomputed covariance matrix.
pub fn report_from_covariance(
    worker_id: usize,
    n: usize,
    s: &DMatrix<f64>,
    hint: SpikeHint,
    options: &ReportOptions,
    gamma4_hat: f64,
) -> Result<LocalEstimate> {
    let y = AspectRatio::from_dims(s.nrows(), n)?;
    let summary = if options.estimate_u4 {
        spectral_decompose(s, y)?
    } else {
        spectral_values(s, y)?
    };
    let loc = estimate_spike(&summary, hint)?;
    let u4sum_hat = if options.estimate_u4 {
        Some(u4_estimate(&summary, loc.j, options.root_choice)?.value)
    } else {
        None
    };
    Ok(LocalEstimate {
        worker_id,
        n,
        y: y.get(),
        k: hint.k,
        j: loc.j,
        alpha_hat: loc.alpha_hat,
        gamma4_hat,
        u4sum_hat,
        boundary_flag: loc.boundary,
    })
}

/// The full worker pipeline on one shard.
pub fn local_report(
    data: &LocalDataset,
    hint: SpikeHint,
    options: &ReportOptions,
    root: Option<&CovarianceRoot>,
) -> Result<LocalEstimate> {
    let gamma4_hat = gamma4_estimate(data, options.gamma4_mode, root)?;
    let s = sample_covariance(data);
    report_from_covariance(data.worker_id, data.n(), &s, hint, options, gamma4_hat)
}
