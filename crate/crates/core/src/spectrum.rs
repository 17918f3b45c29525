//! Marchenko–Pastur bulk geometry, the spike map and its inverse, and the
//! asymptotic variance of the inverted spike estimate.
//!
//! For a population spike `α` outside `[1-√y, 1+√y]` the matching sample
//! eigenvalue converges to
//!
//! ```text
//! φ(α) = α + y·α/(α-1)
//! ```
//!
//! which lies outside the sample support `[(1-√y)², (1+√y)²]`. Inverting `φ`
//! amounts to solving `α² - (λ+1-y)α + λ = 0`; the larger root belongs to
//! spikes above the bulk and the smaller root to spikes below it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Limiting dimension-to-sample ratio `p/n`, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct AspectRatio(f64);

impl AspectRatio {
    pub fn new(y: f64) -> Result<Self> {
        if y.is_finite() && y > 0.0 && y < 1.0 {
            Ok(AspectRatio(y))
        } else {
            Err(Error::InvalidRatio(y))
        }
    }

    /// Ratio of a `p`-dimensional shard holding `n` observations.
    pub fn from_dims(p: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidRatio(f64::INFINITY));
        }
        Self::new(p as f64 / n as f64)
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for AspectRatio {
    type Error = Error;
    fn try_from(y: f64) -> Result<Self> {
        AspectRatio::new(y)
    }
}

impl From<AspectRatio> for f64 {
    fn from(y: AspectRatio) -> f64 {
        y.0
    }
}

/// Ends of the population interval `1 ∓ √y` and of the sample support `(1 ∓ √y)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BulkEdges {
    pub pop_lo: f64,
    pub pop_hi: f64,
    pub samp_lo: f64,
    pub samp_hi: f64,
}

impl BulkEdges {
    /// Whether `alpha` falls in the closed population interval.
    pub fn contains_spike(&self, alpha: f64) -> bool {
        alpha >= self.pop_lo && alpha <= self.pop_hi
    }

    /// Whether `lambda` falls strictly inside the sample support.
    pub fn inside_sample_bulk(&self, lambda: f64) -> bool {
        lambda > self.samp_lo && lambda < self.samp_hi
    }
}

pub fn bulk_edges(y: AspectRatio) -> BulkEdges {
    let r = y.get().sqrt();
    let pop_lo = 1.0 - r;
    let pop_hi = 1.0 + r;
    BulkEdges {
        pop_lo,
        pop_hi,
        samp_lo: pop_lo * pop_lo,
        samp_hi: pop_hi * pop_hi,
    }
}

/// Which side of the bulk a spike sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpikeSide {
    /// `α > 1 + √y`; the estimate reads the `k`-th largest sample eigenvalue.
    Upper,
    /// `α < 1 - √y`; the estimate reads eigenvalue `p - M + k`.
    Lower,
}

impl SpikeSide {
    /// Side of a spike relative to the unit level. Spikes equal to one have no side.
    pub fn of(alpha: f64) -> Option<SpikeSide> {
        if alpha > 1.0 {
            Some(SpikeSide::Upper)
        } else if alpha < 1.0 && alpha > 0.0 {
            Some(SpikeSide::Lower)
        } else {
            None
        }
    }

    /// 1-based position of the sample eigenvalue (descending order) that
    /// tracks spike `k` out of `m_total` spikes in a `p`-dimensional model.
    pub fn eigen_index(self, k: usize, m_total: usize, p: usize) -> usize {
        match self {
            SpikeSide::Upper => k,
            SpikeSide::Lower => p - m_total + k,
        }
    }
}

impl std::str::FromStr for SpikeSide {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "upper" => Ok(SpikeSide::Upper),
            "lower" => Ok(SpikeSide::Lower),
            other => Err(Error::InvalidParameter(format!("unknown spike side {other:?}"))),
        }
    }
}

/// Spike map `φ(α) = α + yα/(α-1)`.
pub fn phi_map(alpha: f64, y: AspectRatio) -> Result<f64> {
    let edges = bulk_edges(y);
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("spike must be positive and finite, got {alpha}")));
    }
    if edges.contains_spike(alpha) {
        return Err(Error::SpikeInsideBulk {
            alpha,
            lo: edges.pop_lo,
            hi: edges.pop_hi,
        });
    }
    Ok(alpha + y.get() * alpha / (alpha - 1.0))
}

/// Output of [`psi_inverse`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeEstimate {
    pub alpha: f64,
    /// Set when `lambda` sits exactly on a sample-support edge (zero discriminant).
    pub boundary: bool,
}

/// Inverse of [`phi_map`] on the requested side of the bulk.
pub fn psi_inverse(lambda: f64, y: AspectRatio, side: SpikeSide) -> Result<SpikeEstimate> {
    let edges = bulk_edges(y);
    let not_spiked = || Error::NotSpiked {
        lambda,
        lo: edges.samp_lo,
        hi: edges.samp_hi,
    };
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(not_spiked());
    }
    let on_side = match side {
        SpikeSide::Upper => lambda >= edges.samp_hi,
        SpikeSide::Lower => lambda <= edges.samp_lo,
    };
    // (λ+1-y)² - 4λ factors as (λ - samp_lo)(λ - samp_hi).
    let disc = (lambda - edges.samp_lo) * (lambda - edges.samp_hi);
    if !on_side || disc < 0.0 {
        return Err(not_spiked());
    }
    let b = lambda + 1.0 - y.get();
    let upper = 0.5 * (b + disc.sqrt());
    let alpha = match side {
        SpikeSide::Upper => upper,
        // product of the two roots is λ; avoids cancellation in b - √disc
        SpikeSide::Lower => lambda / upper,
    };
    Ok(SpikeEstimate {
        alpha,
        boundary: disc == 0.0,
    })
}

/// Asymptotic variance of `√n(α̂ - α)` together with the nuisance inputs that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceModel {
    pub gamma4: f64,
    pub u4sum: f64,
    pub sigma2: f64,
}

/// `σ² = (γ₄-3)α²Σu⁴ + 2α²(α-1)²/((α-1)²-y)`.
pub fn clt_variance(alpha: f64, y: AspectRatio, gamma4: f64, u4sum: f64) -> Result<VarianceModel> {
    if !(gamma4.is_finite() && gamma4 >= 1.0) {
        return Err(Error::InvalidParameter(format!("gamma4 must be >= 1, got {gamma4}")));
    }
    if !(0.0..=1.0).contains(&u4sum) {
        return Err(Error::InvalidParameter(format!("u4sum must lie in [0, 1], got {u4sum}")));
    }
    let gap = (alpha - 1.0) * (alpha - 1.0);
    if !(gap > y.get()) || !alpha.is_finite() {
        return Err(Error::DegenerateVariance { gap, y: y.get() });
    }
    let a2 = alpha * alpha;
    let sigma2 = (gamma4 - 3.0) * a2 * u4sum + 2.0 * a2 * gap / (gap - y.get());
    if !(sigma2 > 0.0) {
        return Err(Error::DegenerateVariance { gap, y: y.get() });
    }
    Ok(VarianceModel {
        gamma4,
        u4sum,
        sigma2,
    })
}

/// Gaussian entries with diagonal `Σ`: the kurtosis term drops out.
pub fn gaussian_variance(alpha: f64, y: AspectRatio) -> Result<VarianceModel> {
    let gap = (alpha - 1.0) * (alpha - 1.0);
    if !(gap > y.get()) || !alpha.is_finite() {
        return Err(Error::DegenerateVariance { gap, y: y.get() });
    }
    Ok(VarianceModel {
        gamma4: 3.0,
        u4sum: 0.0,
        sigma2: 2.0 * alpha * alpha * gap / (gap - y.get()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ratio(y: f64) -> AspectRatio {
        AspectRatio::new(y).unwrap()
    }

    #[test]
    fn phi_examples() {
        assert_relative_eq!(phi_map(10.0, ratio(1e-15)).unwrap(), 10.0, epsilon = 1e-12);
        // 10 + 0.5*10/9
        assert_relative_eq!(phi_map(10.0, ratio(0.5)).unwrap(), 10.0 + 5.0 / 9.0, epsilon = 1e-14);
        // 0.01 + 0.25*0.01/(-0.99)
        let lo = phi_map(0.01, ratio(0.25)).unwrap();
        assert_relative_eq!(lo, 0.01 - 0.0025 / 0.99, epsilon = 1e-16);
        assert!(lo < bulk_edges(ratio(0.25)).samp_lo);
    }

    #[test]
    fn phi_rejects_spike_in_bulk() {
        assert!(matches!(phi_map(1.2, ratio(0.25)), Err(Error::SpikeInsideBulk { .. })));
        assert!(matches!(phi_map(1.5, ratio(0.25)), Err(Error::SpikeInsideBulk { .. })));
        assert!(matches!(phi_map(0.5, ratio(0.25)), Err(Error::SpikeInsideBulk { .. })));
    }

    #[test]
    fn psi_examples() {
        let est = psi_inverse(10.0 + 5.0 / 9.0, ratio(0.5), SpikeSide::Upper).unwrap();
        assert_relative_eq!(est.alpha, 10.0, epsilon = 1e-12);
        assert!(!est.boundary);

        let edge = psi_inverse(2.25, ratio(0.25), SpikeSide::Upper).unwrap();
        assert_eq!(edge.alpha, 1.5);
        assert!(edge.boundary);

        assert!(matches!(
            psi_inverse(2.0, ratio(0.5), SpikeSide::Upper),
            Err(Error::NotSpiked { .. })
        ));
    }

    #[test]
    fn psi_rejects_wrong_side() {
        let lam = phi_map(0.01, ratio(0.25)).unwrap();
        assert!(psi_inverse(lam, ratio(0.25), SpikeSide::Upper).is_err());
        let est = psi_inverse(lam, ratio(0.25), SpikeSide::Lower).unwrap();
        assert_relative_eq!(est.alpha, 0.01, epsilon = 1e-15);
        assert!(psi_inverse(12.0, ratio(0.25), SpikeSide::Lower).is_err());
    }

    #[test]
    fn edges_examples() {
        let e = bulk_edges(ratio(0.25));
        assert_eq!((e.pop_lo, e.pop_hi, e.samp_lo, e.samp_hi), (0.5, 1.5, 0.25, 2.25));

        let tiny = bulk_edges(ratio(1e-300));
        for v in [tiny.pop_lo, tiny.pop_hi, tiny.samp_lo, tiny.samp_hi] {
            assert_relative_eq!(v, 1.0, epsilon = 1e-140);
        }

        let e = bulk_edges(ratio(0.5));
        assert_relative_eq!(e.samp_lo, 0.085786437626905, epsilon = 1e-12);
        assert_relative_eq!(e.samp_hi, 2.914213562373095, epsilon = 1e-12);
    }

    #[test]
    fn invalid_ratio() {
        for y in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(matches!(AspectRatio::new(y), Err(Error::InvalidRatio(_))));
        }
    }

    #[test]
    fn variance_examples() {
        let y = ratio(0.5);
        let base = 16200.0 / 80.5;
        assert_relative_eq!(clt_variance(10.0, y, 3.0, 0.37).unwrap().sigma2, base, max_relative = 1e-14);
        assert_relative_eq!(clt_variance(10.0, y, 1.0, 1.0).unwrap().sigma2, base - 200.0, max_relative = 1e-12);
        assert_relative_eq!(clt_variance(10.0, y, 7.0, 0.0).unwrap().sigma2, base, max_relative = 1e-14);
        assert_relative_eq!(gaussian_variance(10.0, y).unwrap().sigma2, base, max_relative = 1e-14);

        let low = gaussian_variance(0.01, ratio(0.25)).unwrap().sigma2;
        assert_relative_eq!(low, 2.0 * 0.0001 * 0.9801 / (0.9801 - 0.25), max_relative = 1e-14);
        assert_relative_eq!(low, 2.6849e-4, max_relative = 1e-4);
    }

    #[test]
    fn variance_errors() {
        assert!(matches!(
            clt_variance(1.2, ratio(0.5), 3.0, 0.5),
            Err(Error::DegenerateVariance { .. })
        ));
        assert!(clt_variance(10.0, ratio(0.5), 0.5, 0.5).is_err());
        assert!(clt_variance(10.0, ratio(0.5), 3.0, 1.5).is_err());
    }

    #[test]
    fn variance_diverges_at_the_edge() {
        let y = 0.3;
        let at = |eps: f64| {
            let alpha = 1.0 + (y * (1.0 + eps)).sqrt();
            clt_variance(alpha, ratio(y), 2.0, 0.4).unwrap().sigma2
        };
        for eps in [1e-1, 1e-3, 1e-6] {
            assert!(at(eps) > at(2.0 * eps));
        }
    }

    #[test]
    fn edge_algebra_is_exact() {
        for y in [0.01, 0.1, 0.25, 0.5, 0.77, 0.99] {
            let e = bulk_edges(ratio(y));
            assert_eq!(e.samp_lo, e.pop_lo * e.pop_lo);
            assert_eq!(e.samp_hi, e.pop_hi * e.pop_hi);
            assert!(0.0 < e.pop_lo && e.pop_lo < 1.0 && 1.0 < e.pop_hi);
        }
    }

    fn spike_and_ratio() -> impl Strategy<Value = (f64, f64)> {
        (0.01f64..0.99, any::<bool>(), 1e-3f64..1.0).prop_map(|(y, upper, frac)| {
            let r = y.sqrt();
            let alpha = if upper {
                1.0 + r + frac * 60.0
            } else {
                (1.0 - r) * (1.0 - frac).max(1e-4)
            };
            (alpha, y)
        })
    }

    proptest! {
        #[test]
        fn round_trip((alpha, y) in spike_and_ratio()) {
            let y = ratio(y);
            let side = SpikeSide::of(alpha).unwrap();
            let lam = phi_map(alpha, y).unwrap();
            let back = psi_inverse(lam, y, side).unwrap().alpha;
            prop_assert!((back - alpha).abs() <= 1e-10 * alpha.max(1.0));
        }

        #[test]
        fn phi_increasing((alpha, y) in spike_and_ratio(), step in 1e-6f64..1e-2) {
            let ry = ratio(y);
            let side = SpikeSide::of(alpha).unwrap();
            let other = match side {
                SpikeSide::Upper => alpha + step,
                SpikeSide::Lower => alpha * (1.0 - step),
            };
            let (a, b) = (phi_map(alpha, ry).unwrap(), phi_map(other, ry).unwrap());
            match side {
                SpikeSide::Upper => prop_assert!(b > a),
                SpikeSide::Lower => prop_assert!(b < a),
            }
        }

        #[test]
        fn variance_positive((alpha, y) in spike_and_ratio(), g in 1.0f64..20.0, u in 0.0f64..=1.0) {
            if (alpha - 1.0).powi(2) > y {
                prop_assert!(clt_variance(alpha, ratio(y), g, u).unwrap().sigma2 > 0.0);
            }
        }
    }
}
