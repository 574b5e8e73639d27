//! One-dimensional optimal transport on empirical samples.
//!
//! Order statistics `v_1 <= ... <= v_n` sit at plotting positions
//! `p_i = (i - 0.5) / n`. The CDF and the quantile function (QF) interpolate
//! linearly between the points `(v_i, p_i)`, which makes them inverse to each
//! other on the interior. Outside the sample range the CDF saturates at
//! `p_1` / `p_n` and the QF clamps to the extreme order statistics, so maps
//! built from them stay bounded for particles that wander off.
//!
//! The squared distance [`w2_squared_1d`] integrates the *empirical* (step)
//! quantile function with the midpoint rule. On a grid that is a multiple of
//! both sample sizes this is the exact W2² between the two empirical measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NUM_QUANTILES: usize = 100;

/// Sorted 1D sample with CDF / quantile evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Empirical1D {
    values: Vec<f64>,
    num_quantiles: usize,
}

impl Empirical1D {
    /// Sorts `values`. Fails on an empty or non-finite sample.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample"));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self {
            values,
            num_quantiles: DEFAULT_NUM_QUANTILES,
        })
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec())
    }

    pub fn with_num_quantiles(mut self, num_quantiles: usize) -> Self {
        self.num_quantiles = num_quantiles.max(1);
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_quantiles(&self) -> usize {
        self.num_quantiles
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
            / self.values.len() as f64;
        var.sqrt()
    }

    /// Interpolated CDF at `z`, in `[1/(2n), 1 - 1/(2n)]`.
    ///
    /// A value hit exactly by a block of tied order statistics `v_i..=v_j`
    /// gets the midpoint `(p_i + p_j) / 2` of the block.
    pub fn cdf(&self, z: f64) -> f64 {
        let v = &self.values;
        let n = v.len();
        let nf = n as f64;
        // below: number of values < z, upto: number of values <= z
        let below = v.partition_point(|&x| x < z);
        let upto = below + v[below..].partition_point(|&x| x <= z);
        if upto > below {
            return (below + upto) as f64 / (2.0 * nf);
        }
        if below == 0 {
            return 0.5 / nf;
        }
        if below == n {
            return (nf - 0.5) / nf;
        }
        // v[below - 1] < z < v[below]
        let lo = v[below - 1];
        let hi = v[below];
        let frac = (z - lo) / (hi - lo);
        (below as f64 - 0.5 + frac) / nf
    }

    /// Interpolated quantile function; `tau` must lie in `[0, 1]`.
    pub fn quantile(&self, tau: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::QuantileOutOfRange(tau));
        }
        Ok(self.quantile_clamped(tau))
    }

    /// Same as [`quantile`](Self::quantile) for a `tau` already known to be a probability.
    pub(crate) fn quantile_clamped(&self, tau: f64) -> f64 {
        let v = &self.values;
        let n = v.len();
        // position in 1-based order-statistic units: p_i maps to i
        let pos = tau * n as f64 + 0.5;
        if pos <= 1.0 {
            return v[0];
        }
        if pos >= n as f64 {
            return v[n - 1];
        }
        let i = pos.floor();
        let frac = pos - i;
        let i = i as usize; // 1 <= i < n
        let lo = v[i - 1];
        let hi = v[i];
        lo + frac * (hi - lo)
    }

    /// Left-continuous inverse of the empirical step CDF: `v_{ceil(tau n)}`.
    pub fn step_quantile(&self, tau: f64) -> f64 {
        let n = self.values.len();
        let idx = (tau * n as f64).ceil() as isize;
        let idx = idx.clamp(1, n as isize) as usize;
        self.values[idx - 1]
    }

    /// Interpolated QF tabulated at the midpoint grid of `num_quantiles` levels.
    ///
    /// The table's own plotting positions coincide with the grid, so its CDF
    /// and QF agree with this sample's at the grid levels.
    pub fn quantile_table(&self, num_quantiles: usize) -> Empirical1D {
        let values = quantile_grid(num_quantiles)
            .map(|tau| self.quantile_clamped(tau))
            .collect();
        Empirical1D {
            values,
            num_quantiles,
        }
    }

    /// Applies the monotone map `z -> QF_target(CDF_self(z))`.
    pub fn transport_to(&self, z: f64, target: &Empirical1D) -> f64 {
        target.quantile_clamped(self.cdf(z))
    }
}

/// Midpoint grid `(j - 0.5) / m`, `j = 1..=m`.
pub fn quantile_grid(num_quantiles: usize) -> impl Iterator<Item = f64> {
    let m = num_quantiles as f64;
    (1..=num_quantiles).map(move |j| (j as f64 - 0.5) / m)
}

pub fn empirical_cdf(sample: &Empirical1D, z: f64) -> f64 {
    sample.cdf(z)
}

pub fn quantile_function(sample: &Empirical1D, tau: f64) -> Result<f64> {
    sample.quantile(tau)
}

/// Squared 2-Wasserstein distance between two 1D samples.
pub fn w2_squared_1d(mu: &Empirical1D, nu: &Empirical1D, num_quantiles: usize) -> Result<f64> {
    if num_quantiles < 2 {
        return Err(Error::InvalidConfig(format!(
            "num_quantiles must be >= 2, got {num_quantiles}"
        )));
    }
    let total: f64 = quantile_grid(num_quantiles)
        .map(|tau| {
            let d = mu.step_quantile(tau) - nu.step_quantile(tau);
            d * d
        })
        .sum();
    Ok(total / num_quantiles as f64)
}

/// Derivative of the 1D Kantorovich potential from `source` to `target` at `z`.
///
/// `z - potential_derivative(z, ..)` is the monotone optimal map.
pub fn potential_derivative(z: f64, source: &Empirical1D, target: &Empirical1D) -> f64 {
    z - source.transport_to(z, target)
}
