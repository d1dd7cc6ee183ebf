//! Estimation when who-infects-whom is observed.

use std::collections::BTreeMap;
use std::fmt;

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::PairRiskRow;
use crate::error::{Error, Result};
use crate::relrisk::RelRisk;
use crate::riskset::{Eval, Jump, Level, RiskData, Ties};
use crate::stats::{normal_quantile, wald_p_value};
use crate::stepfn::{BaselinePoint, StepCumHaz};

const SCORE_TOL: f64 = 1e-8;
const PL_TOL: f64 = 1e-9;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfoKind {
    Observed,
    Expected,
}

impl fmt::Display for InfoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InfoKind::Observed => "observed",
            InfoKind::Expected => "expected",
        })
    }
}

impl InfoKind {
    /// Observed for the loglinear family (where both coincide), expected
    /// for the linear family because it is positive semidefinite.
    pub fn default_for(spec: RelRisk) -> Self {
        if spec.is_loglinear() {
            InfoKind::Observed
        } else {
            InfoKind::Expected
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub relrisk: RelRisk,
    pub ties: Ties,
    pub max_iter: usize,
    /// Starting value, zero when absent.
    pub beta_init: Option<Vec<f64>>,
    /// Information used for `cov_beta`; family default when absent.
    pub info_kind: Option<InfoKind>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            relrisk: RelRisk::Loglinear,
            ties: Ties::Efron,
            max_iter: 50,
            beta_init: None,
            info_kind: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub covariate_names: Vec<String>,
    pub relrisk: RelRisk,
    pub ties: Ties,
    pub beta_hat: DVector<f64>,
    pub cov_beta: DMatrix<f64>,
    /// Log partial likelihood at `beta_hat`.
    pub loglik: f64,
    pub info_kind: InfoKind,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the score at `beta_hat`.
    pub score_norm: f64,
    pub baseline: BTreeMap<i64, StepCumHaz>,
    pub n_rows: usize,
    pub n_events: f64,
}

impl FitResult {
    pub fn std_errors(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.beta_hat.len(),
            (0..self.beta_hat.len()).map(|k| self.cov_beta[(k, k)].max(0.0).sqrt()),
        )
    }

    /// Wald interval for coefficient `k`.
    pub fn wald_ci(&self, k: usize, alpha: f64) -> (f64, f64) {
        wald_interval(self.beta_hat[k], self.cov_beta[(k, k)], alpha)
    }

    pub fn report(&self, alpha: f64) -> FitReport {
        FitReport {
            relrisk: self.relrisk,
            ties: self.ties,
            info_kind: self.info_kind,
            loglik: self.loglik,
            iterations: self.iterations,
            converged: self.converged,
            score_norm: self.score_norm,
            n_rows: self.n_rows,
            n_events: self.n_events,
            alpha,
            coefficients: coefficient_table(&self.covariate_names, &self.beta_hat, &self.cov_beta, alpha),
            baseline: baseline_tables(&self.baseline, alpha),
        }
    }
}

pub(crate) fn wald_interval(estimate: f64, var: f64, alpha: f64) -> (f64, f64) {
    let half = normal_quantile(1.0 - alpha / 2.0) * var.max(0.0).sqrt();
    (estimate - half, estimate + half)
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
    pub z: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StratumBaseline {
    pub stratum: i64,
    pub table: Vec<BaselinePoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub relrisk: RelRisk,
    pub ties: Ties,
    pub info_kind: InfoKind,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub score_norm: f64,
    pub n_rows: usize,
    pub n_events: f64,
    pub alpha: f64,
    pub coefficients: Vec<CoefficientRow>,
    pub baseline: Vec<StratumBaseline>,
}

pub(crate) fn coefficient_table(
    names: &[String],
    beta: &DVector<f64>,
    cov: &DMatrix<f64>,
    alpha: f64,
) -> Vec<CoefficientRow> {
    (0..beta.len())
        .map(|k| {
            let se = cov[(k, k)].max(0.0).sqrt();
            let (lo, hi) = wald_interval(beta[k], cov[(k, k)], alpha);
            CoefficientRow {
                name: names.get(k).cloned().unwrap_or_else(|| format!("x{k}")),
                estimate: beta[k],
                se,
                lo,
                hi,
                z: beta[k] / se,
                p: wald_p_value(beta[k], se),
            }
        })
        .collect()
}

pub(crate) fn baseline_tables(baseline: &BTreeMap<i64, StepCumHaz>, alpha: f64) -> Vec<StratumBaseline> {
    baseline
        .iter()
        .map(|(&stratum, h)| StratumBaseline {
            stratum,
            table: h.table(alpha),
        })
        .collect()
}

fn beta_vec(beta: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(beta)
}

/// Log partial likelihood `pl(beta)` summed over strata.
pub fn log_partial_likelihood(rows: &[PairRiskRow], beta: &[f64], spec: RelRisk, ties: Ties) -> Result<f64> {
    let data = RiskData::complete(rows, beta.len())?;
    Ok(data.evaluate(&beta_vec(beta), spec, ties, Level::Value, false)?.pl)
}

pub fn score(rows: &[PairRiskRow], beta: &[f64], spec: RelRisk, ties: Ties) -> Result<DVector<f64>> {
    let data = RiskData::complete(rows, beta.len())?;
    Ok(data.evaluate(&beta_vec(beta), spec, ties, Level::Score, false)?.score)
}

/// Negative Hessian of `pl`.
pub fn observed_information(rows: &[PairRiskRow], beta: &[f64], spec: RelRisk, ties: Ties) -> Result<DMatrix<f64>> {
    let data = RiskData::complete(rows, beta.len())?;
    Ok(data.evaluate(&beta_vec(beta), spec, ties, Level::Full, false)?.observed)
}

/// Sum over events of the risk-weighted covariance of `d ln r / d beta`.
pub fn expected_information(rows: &[PairRiskRow], beta: &[f64], spec: RelRisk, ties: Ties) -> Result<DMatrix<f64>> {
    let data = RiskData::complete(rows, beta.len())?;
    Ok(data.evaluate(&beta_vec(beta), spec, ties, Level::Full, false)?.expected)
}

/// Inverse of a symmetric positive definite matrix, or `Singular` with a
/// condition estimate when its smallest eigenvalue is negligible.
pub(crate) fn invert_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = info.nrows();
    if p == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (info + info.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(f64::INFINITY));
    }
    let eig = SymmetricEigen::new(sym.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= 1e-12 * max {
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(Error::Singular(cond));
    }
    let inv = sym.cholesky().map(|c| c.inverse()).ok_or(Error::Singular(max / min))?;
    Ok((&inv + inv.transpose()) * 0.5)
}

pub(crate) struct NewtonOutcome {
    pub beta: DVector<f64>,
    pub eval: Eval,
    pub iterations: usize,
}

/// Newton-Raphson with step halving on a prepared risk set.
pub(crate) fn newton(
    data: &RiskData,
    spec: RelRisk,
    ties: Ties,
    beta0: DVector<f64>,
    max_iter: usize,
) -> Result<NewtonOutcome> {
    let mut beta = beta0;
    let mut eval = data.evaluate(&beta, spec, ties, Level::Full, false)?;
    if data.p == 0 {
        return Ok(NewtonOutcome { beta, eval, iterations: 0 });
    }
    for iter in 1..=max_iter {
        if eval.score.amax() < SCORE_TOL {
            return Ok(NewtonOutcome {
                beta,
                eval,
                iterations: iter - 1,
            });
        }
        let dir = match invert_information(&eval.observed) {
            Ok(inv) => inv * &eval.score,
            Err(_) => invert_information(&eval.expected)? * &eval.score,
        };
        let mut step = 1.0;
        if !spec.is_loglinear() {
            step = f64::min(1.0, 0.999 * data.linear_step_bound(&beta, &dir));
        }
        let slack = 1e-12 * eval.pl.abs().max(1.0);
        let mut halvings = 0;
        let (candidate, pl_new) = loop {
            let candidate = &beta + &dir * step;
            match data.evaluate(&candidate, spec, ties, Level::Value, false) {
                Ok(e) if e.pl >= eval.pl - slack => break (candidate, e.pl),
                Ok(_) | Err(Error::Domain(_)) => {}
                Err(e) => return Err(e),
            }
            halvings += 1;
            if halvings > MAX_HALVINGS {
                return Err(Error::StepHalving(MAX_HALVINGS));
            }
            step *= 0.5;
        };
        let delta = pl_new - eval.pl;
        debug!("newton iteration {iter}: pl {pl_new:.10} (delta {delta:.3e}, step {step})");
        beta = candidate;
        eval = data.evaluate(&beta, spec, ties, Level::Full, false)?;
        if delta.abs() < PL_TOL {
            return Ok(NewtonOutcome {
                beta,
                eval,
                iterations: iter,
            });
        }
    }
    Err(Error::NoConvergence(max_iter))
}

/// Breslow jumps `dN(u) / Y(beta, u)` from recorded risk-set summaries,
/// with the variance `dLambda' cov dLambda + sum dN / Y^2` when `cov` is given.
pub(crate) fn baseline_from_jumps(jumps: &[Jump], cov: Option<&DMatrix<f64>>, p: usize) -> Result<StepCumHaz> {
    let times = jumps.iter().map(|j| j.time).collect();
    let increments = jumps.iter().map(|j| j.w_d / j.s0).collect();
    let cumhaz = StepCumHaz::new(times, increments)?;
    let mut dlambda = DVector::zeros(p);
    let mut second = 0.0;
    let mut variance = Vec::with_capacity(jumps.len());
    for j in jumps {
        second += j.w_d / (j.s0 * j.s0);
        dlambda -= &j.s1 * (j.w_d / (j.s0 * j.s0));
        let first = match cov {
            Some(c) if p > 0 => (dlambda.transpose() * c * &dlambda)[(0, 0)],
            _ => 0.0,
        };
        variance.push(first + second);
    }
    cumhaz.with_variance(variance)
}

/// Breslow estimate per stratum at `beta`. Jumps are `dN / Y` whatever the
/// tie policy, so at `beta = 0` this is the Nelson-Aalen estimator.
pub fn breslow_baseline(rows: &[PairRiskRow], beta: &[f64], spec: RelRisk) -> Result<BTreeMap<i64, StepCumHaz>> {
    let data = RiskData::complete(rows, beta.len())?;
    let eval = data.evaluate(&beta_vec(beta), spec, Ties::Breslow, Level::Score, true)?;
    data.strata
        .iter()
        .zip(&eval.jumps)
        .map(|(s, j)| Ok((s.label, baseline_from_jumps(j, None, beta.len())?)))
        .collect()
}

/// Baseline per stratum with variance computed from the fit's covariance.
pub fn baseline_variance(rows: &[PairRiskRow], fit: &FitResult) -> Result<BTreeMap<i64, StepCumHaz>> {
    let p = fit.beta_hat.len();
    let data = RiskData::complete(rows, p)?;
    let eval = data.evaluate(&fit.beta_hat, fit.relrisk, fit.ties, Level::Score, true)?;
    data.strata
        .iter()
        .zip(&eval.jumps)
        .map(|(s, j)| Ok((s.label, baseline_from_jumps(j, Some(&fit.cov_beta), p)?)))
        .collect()
}

fn fit_from_data(data: &RiskData, names: Vec<String>, opts: &FitOptions) -> Result<FitResult> {
    let p = data.p;
    if data.total_event_mass() <= 0.0 {
        return Err(Error::NoEvents);
    }
    let beta0 = match &opts.beta_init {
        Some(b) if b.len() == p => DVector::from_column_slice(b),
        Some(b) => {
            return Err(Error::InvalidParameter(format!(
                "initial beta has {} entries, expected {p}",
                b.len()
            )))
        }
        None => DVector::zeros(p),
    };
    let outcome = newton(data, opts.relrisk, opts.ties, beta0, opts.max_iter)?;
    let info_kind = opts.info_kind.unwrap_or(InfoKind::default_for(opts.relrisk));
    let info = match info_kind {
        InfoKind::Observed => &outcome.eval.observed,
        InfoKind::Expected => &outcome.eval.expected,
    };
    let cov_beta = invert_information(info)?;
    let record = data.evaluate(&outcome.beta, opts.relrisk, opts.ties, Level::Score, true)?;
    let baseline = data
        .strata
        .iter()
        .zip(&record.jumps)
        .map(|(s, j)| Ok((s.label, baseline_from_jumps(j, Some(&cov_beta), p)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(FitResult {
        covariate_names: names,
        relrisk: opts.relrisk,
        ties: opts.ties,
        score_norm: if p == 0 { 0.0 } else { outcome.eval.score.amax() },
        loglik: outcome.eval.pl,
        beta_hat: outcome.beta,
        cov_beta,
        info_kind,
        iterations: outcome.iterations,
        converged: true,
        baseline,
        n_rows: data.n_rows(),
        n_events: data.total_event_mass(),
    })
}

/// Maximizes the log partial likelihood and estimates the baseline.
pub fn maximize(rows: &[PairRiskRow], covariate_names: &[String], opts: &FitOptions) -> Result<FitResult> {
    let p = covariate_names.len();
    let data = RiskData::complete(rows, p)?;
    fit_from_data(&data, covariate_names.to_vec(), opts)
}
