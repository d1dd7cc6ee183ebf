//! Right-continuous step functions for cumulative hazards.

use serde::Serialize;

use crate::error::{Error, Result};

/// Cumulative hazard with jumps at increasing infectiousness ages and an
/// optional pointwise variance (cumulative, one value per jump time).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepCumHaz {
    times: Vec<f64>,
    increments: Vec<f64>,
    cumulative: Vec<f64>,
    variance: Vec<f64>,
}

/// One row of a baseline table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaselinePoint {
    pub tau: f64,
    pub cumhaz: f64,
    pub var: f64,
    pub lo: f64,
    pub hi: f64,
}

impl StepCumHaz {
    pub fn new(times: Vec<f64>, increments: Vec<f64>) -> Result<Self> {
        if times.len() != increments.len() {
            return Err(Error::InvalidParameter("times and increments differ in length".into()));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter("jump times must be strictly increasing".into()));
        }
        if increments.iter().any(|&d| !(d >= 0.0 && d.is_finite())) {
            return Err(Error::InvalidParameter("increments must be finite and nonnegative".into()));
        }
        let mut acc = 0.0;
        let cumulative = increments
            .iter()
            .map(|&d| {
                acc += d;
                acc
            })
            .collect();
        let n = times.len();
        Ok(StepCumHaz {
            times,
            increments,
            cumulative,
            variance: vec![0.0; n],
        })
    }

    pub fn with_variance(mut self, variance: Vec<f64>) -> Result<Self> {
        if variance.len() != self.times.len() {
            return Err(Error::InvalidParameter("variance length differs from jump count".into()));
        }
        if variance.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidParameter("variance is NaN".into()));
        }
        // Rounding can push a nil variance slightly negative.
        self.variance = variance.into_iter().map(|v| v.max(0.0)).collect();
        Ok(self)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn variances(&self) -> &[f64] {
        &self.variance
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Number of jumps at or before `tau`.
    fn rank(&self, tau: f64) -> usize {
        self.times.partition_point(|&t| t <= tau)
    }

    pub fn eval(&self, tau: f64) -> f64 {
        match self.rank(tau) {
            0 => 0.0,
            k => self.cumulative[k - 1],
        }
    }

    pub fn variance_at(&self, tau: f64) -> f64 {
        match self.rank(tau) {
            0 => 0.0,
            k => self.variance[k - 1],
        }
    }

    /// `exp(-Lambda(tau))`.
    pub fn survival(&self, tau: f64) -> f64 {
        (-self.eval(tau)).exp()
    }

    /// Product-integral survival `prod (1 - dLambda)`, floored at 0.
    pub fn survival_product(&self, tau: f64) -> f64 {
        self.increments[..self.rank(tau)]
            .iter()
            .fold(1.0, |s, &d| s * (1.0 - d).max(0.0))
    }

    /// Pointwise band `Lambda exp(+-z sigma / Lambda)` at `tau`.
    pub fn point(&self, tau: f64, alpha: f64) -> BaselinePoint {
        let cumhaz = self.eval(tau);
        let var = self.variance_at(tau);
        let (lo, hi) = log_band(cumhaz, var, alpha);
        BaselinePoint { tau, cumhaz, var, lo, hi }
    }

    /// The band at every jump time.
    pub fn table(&self, alpha: f64) -> Vec<BaselinePoint> {
        self.times.iter().map(|&t| self.point(t, alpha)).collect()
    }

    /// Largest absolute difference between two step functions, attained at
    /// one of their jump times.
    pub fn sup_distance(&self, other: &StepCumHaz) -> f64 {
        self.times
            .iter()
            .chain(other.times.iter())
            .map(|&t| (self.eval(t) - other.eval(t)).abs())
            .fold(0.0, f64::max)
    }
}

/// Confidence limits `Lambda exp(+-z sigma / Lambda)`; degenerate `[0, 0]`
/// where `Lambda = 0`.
pub fn log_band(cumhaz: f64, var: f64, alpha: f64) -> (f64, f64) {
    if cumhaz <= 0.0 {
        return (0.0, 0.0);
    }
    let z = crate::stats::normal_quantile(1.0 - alpha / 2.0);
    let factor = (z * var.max(0.0).sqrt() / cumhaz).exp();
    (cumhaz / factor, cumhaz * factor)
}

/// Pointwise band for a cumulative hazard `cumhaz` with variance `var`.
pub fn baseline_ci(cumhaz: &StepCumHaz, alpha: f64) -> Vec<BaselinePoint> {
    cumhaz.table(alpha)
}
