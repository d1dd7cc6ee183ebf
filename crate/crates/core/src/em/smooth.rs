//! Kernel smoothing of cumulative-hazard increments.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::stepfn::StepCumHaz;

pub const HAZARD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothOptions {
    /// Kernel half-width; `support / 10` when absent.
    pub bandwidth: Option<f64>,
    /// Right end of the data range; the last jump time when absent.
    pub support: Option<f64>,
    pub floor: f64,
}

impl Default for SmoothOptions {
    fn default() -> Self {
        SmoothOptions {
            bandwidth: None,
            support: None,
            floor: HAZARD_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Constant(f64),
    Kernel {
        centers: Vec<f64>,
        /// Jump mass divided by the kernel's mass inside `[0, support]`.
        scaled: Vec<f64>,
        bandwidth: f64,
    },
}

/// Nonnegative hazard on `[0, support]`, floored so that infector
/// probabilities stay defined.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardCurve {
    shape: Shape,
    support: f64,
    floor: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HazardPoint {
    pub tau: f64,
    pub hazard: f64,
}

/// Epanechnikov kernel CDF on `[-1, 1]`.
fn kernel_cdf(z: f64) -> f64 {
    let z = z.clamp(-1.0, 1.0);
    0.5 + 0.75 * z - 0.25 * z * z * z
}

impl HazardCurve {
    pub fn constant(rate: f64, support: f64) -> Self {
        HazardCurve {
            shape: Shape::Constant(rate.max(HAZARD_FLOOR)),
            support,
            floor: HAZARD_FLOOR,
        }
    }

    pub fn support(&self) -> f64 {
        self.support
    }

    pub fn bandwidth(&self) -> Option<f64> {
        match self.shape {
            Shape::Constant(_) => None,
            Shape::Kernel { bandwidth, .. } => Some(bandwidth),
        }
    }

    pub fn method(&self) -> &'static str {
        match self.shape {
            Shape::Constant(_) => "constant",
            Shape::Kernel { .. } => "epanechnikov",
        }
    }

    pub fn eval(&self, tau: f64) -> f64 {
        let raw = match &self.shape {
            Shape::Constant(rate) => *rate,
            Shape::Kernel {
                centers,
                scaled,
                bandwidth,
            } => {
                if !(0.0..=self.support).contains(&tau) {
                    0.0
                } else {
                    let lo = centers.partition_point(|&c| c <= tau - bandwidth);
                    let hi = centers.partition_point(|&c| c < tau + bandwidth);
                    (lo..hi)
                        .map(|k| {
                            let z = (tau - centers[k]) / bandwidth;
                            scaled[k] * 0.75 * (1.0 - z * z) / bandwidth
                        })
                        .sum()
                }
            }
        };
        raw.max(self.floor)
    }

    /// Values on a grid.
    pub fn tabulate(&self, grid: &[f64]) -> Vec<HazardPoint> {
        grid.iter()
            .map(|&tau| HazardPoint {
                tau,
                hazard: self.eval(tau),
            })
            .collect()
    }

    /// `n + 1` equally spaced points on `[0, support]`.
    pub fn default_grid(&self, n: usize) -> Vec<f64> {
        (0..=n).map(|k| self.support * k as f64 / n as f64).collect()
    }
}

/// Smooths the jumps of `cumhaz` with an Epanechnikov kernel. Each kernel is
/// truncated to `[0, support]` and renormalized there, which corrects the
/// boundary bias at 0 and keeps the total jump mass exactly.
pub fn smooth_hazard(cumhaz: &StepCumHaz, opts: &SmoothOptions) -> Result<HazardCurve> {
    if cumhaz.is_empty() {
        return Err(Error::EmptyCumHaz);
    }
    let last = *cumhaz.times().last().expect("nonempty");
    let support = opts.support.unwrap_or(last).max(last);
    if !(support > 0.0 && support.is_finite()) {
        return Err(Error::InvalidParameter(format!("smoothing support {support} must be positive")));
    }
    let bandwidth = opts.bandwidth.unwrap_or(support / 10.0);
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidParameter(format!("bandwidth {bandwidth} must be positive")));
    }
    let mut centers = Vec::with_capacity(cumhaz.len());
    let mut scaled = Vec::with_capacity(cumhaz.len());
    for (&c, &m) in cumhaz.times().iter().zip(cumhaz.increments()) {
        if m == 0.0 {
            continue;
        }
        let inside = kernel_cdf((support - c) / bandwidth) - kernel_cdf(-c / bandwidth);
        centers.push(c);
        scaled.push(m / inside);
    }
    Ok(HazardCurve {
        shape: Shape::Kernel {
            centers,
            scaled,
            bandwidth,
        },
        support,
        floor: opts.floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn empty_cumhaz_is_rejected() {
        let h = StepCumHaz::new(vec![], vec![]).unwrap();
        assert!(matches!(smooth_hazard(&h, &SmoothOptions::default()), Err(Error::EmptyCumHaz)));
    }

    #[test]
    fn huge_bandwidth_is_nearly_constant() {
        let h = StepCumHaz::new(vec![2.0], vec![0.3]).unwrap();
        let opts = SmoothOptions {
            bandwidth: Some(1e6),
            support: Some(4.0),
            ..SmoothOptions::default()
        };
        let curve = smooth_hazard(&h, &opts).unwrap();
        for tau in [0.0, 1.0, 2.0, 3.9] {
            assert!((curve.eval(tau) - 0.3 / 4.0).abs() < 1e-9, "{}", curve.eval(tau));
        }
    }

    #[test]
    fn mass_is_preserved_near_the_boundary() {
        let h = StepCumHaz::new(vec![0.05, 0.3, 1.0, 2.5, 2.95], vec![0.2, 0.1, 0.05, 0.1, 0.3]).unwrap();
        let opts = SmoothOptions {
            support: Some(3.0),
            bandwidth: Some(0.4),
            ..SmoothOptions::default()
        };
        let curve = smooth_hazard(&h, &opts).unwrap();
        // Kernel breakpoints make the integrand piecewise polynomial; a fine
        // grid keeps the quadrature error far below the 1% criterion.
        let area = simpson(|t| curve.eval(t), 0.0, 3.0, 60_000);
        assert!((area - h.total()).abs() < 0.01 * h.total(), "{area} vs {}", h.total());
        assert!((0..=300).all(|k| curve.eval(k as f64 * 0.01) >= HAZARD_FLOOR));
    }

    #[test]
    fn floor_applies_outside_mass() {
        let h = StepCumHaz::new(vec![1.0], vec![0.5]).unwrap();
        let opts = SmoothOptions {
            support: Some(10.0),
            bandwidth: Some(0.5),
            ..SmoothOptions::default()
        };
        let curve = smooth_hazard(&h, &opts).unwrap();
        assert_eq!(curve.eval(5.0), HAZARD_FLOOR);
        assert!(curve.eval(1.0) > 0.5);
    }
}
