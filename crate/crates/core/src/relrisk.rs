//! Relative-risk functions `r(eta)` with `r(0) = 1`.
//!
//! Everything downstream works with `ln r` and its derivatives in `beta`,
//! which for a linear predictor `eta = beta' x` are
//! `d ln r / d beta = (ln r)'(eta) x` and
//! `d^2 ln r / d beta^2 = (ln r)''(eta) x x'`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelRisk {
    /// `r(x) = exp(x)`
    #[default]
    Loglinear,
    /// `r(x) = 1 + x`, defined for `x > -1`
    Linear,
}

impl RelRisk {
    pub fn value(self, eta: f64) -> Result<f64> {
        match self {
            RelRisk::Loglinear => Ok(eta.exp()),
            RelRisk::Linear => {
                let r = 1.0 + eta;
                if r > 0.0 {
                    Ok(r)
                } else {
                    Err(Error::Domain(r))
                }
            }
        }
    }

    /// `(ln r)'(eta)`
    pub fn dlog(self, eta: f64) -> Result<f64> {
        match self {
            RelRisk::Loglinear => Ok(1.0),
            RelRisk::Linear => Ok(1.0 / self.value(eta)?),
        }
    }

    /// `(ln r)''(eta)`
    pub fn d2log(self, eta: f64) -> Result<f64> {
        match self {
            RelRisk::Loglinear => Ok(0.0),
            RelRisk::Linear => {
                let r = self.value(eta)?;
                Ok(-1.0 / (r * r))
            }
        }
    }

    /// Whether `(ln r)''` vanishes identically, making observed and
    /// expected information coincide.
    pub fn is_loglinear(self) -> bool {
        matches!(self, RelRisk::Loglinear)
    }
}

impl fmt::Display for RelRisk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RelRisk::Loglinear => f.write_str("loglinear"),
            RelRisk::Linear => f.write_str("linear"),
        }
    }
}

impl FromStr for RelRisk {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loglinear" | "exp" | "cox" => Ok(RelRisk::Loglinear),
            "linear" => Ok(RelRisk::Linear),
            other => Err(Error::InvalidParameter(format!(
                "unknown relative risk family `{other}`"
            ))),
        }
    }
}

pub fn rr_value(spec: RelRisk, eta: f64) -> Result<f64> {
    spec.value(eta)
}

pub fn rr_log_grad(spec: RelRisk, x: &DVector<f64>, beta: &DVector<f64>) -> Result<DVector<f64>> {
    let eta = beta.dot(x);
    Ok(x * spec.dlog(eta)?)
}

pub fn rr_log_hess(spec: RelRisk, x: &DVector<f64>, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let eta = beta.dot(x);
    Ok(x * x.transpose() * spec.d2log(eta)?)
}
