//! Estimation when who-infects-whom is not observed.
//!
//! The E-step assigns each infectee a distribution over its possible
//! infectors; the CM steps maximize the expected log partial likelihood in
//! `beta` and re-estimate the baseline by the marginal Breslow estimator.

mod smooth;
mod trees;

use std::collections::BTreeMap;
use std::io::Write;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::complete::{baseline_tables, coefficient_table, invert_information, newton, CoefficientRow, StratumBaseline};
use crate::data::{InfectiousSets, PairRiskRow, PairTable};
use crate::error::{Error, Result};
use crate::relrisk::RelRisk;
use crate::riskset::{Eval, Level, RiskData, Ties};
use crate::stepfn::StepCumHaz;

pub use smooth::{smooth_hazard, HazardCurve, HazardPoint, SmoothOptions, HAZARD_FLOOR};
pub use trees::{enumerate_trees, TreeIter, DEFAULT_TREE_LIMIT};

/// Per-infectee distribution over possible infectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InfectorWeights {
    by_infectee: BTreeMap<u64, Vec<(u64, f64)>>,
}

impl InfectorWeights {
    pub fn uniform(sets: &InfectiousSets) -> Self {
        let by_infectee = sets
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(j, s)| {
                let p = 1.0 / s.len() as f64;
                (j, s.iter().map(|&i| (i, p)).collect())
            })
            .collect();
        InfectorWeights { by_infectee }
    }

    pub fn set(&mut self, infectee: u64, probs: Vec<(u64, f64)>) {
        self.by_infectee.insert(infectee, probs);
    }

    /// `p_ij`, the probability that `infector` infected `infectee`.
    pub fn get(&self, infectee: u64, infector: u64) -> Option<f64> {
        self.by_infectee
            .get(&infectee)?
            .iter()
            .find(|(i, _)| *i == infector)
            .map(|&(_, p)| p)
    }

    pub fn infectee(&self, infectee: u64) -> Option<&[(u64, f64)]> {
        self.by_infectee.get(&infectee).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[(u64, f64)])> + '_ {
        self.by_infectee.iter().map(|(&j, v)| (j, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.by_infectee.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_infectee.is_empty()
    }

    /// Largest `|sum_i p_ij - 1|` over infectees.
    pub fn max_normalization_error(&self) -> f64 {
        self.by_infectee
            .values()
            .map(|v| (v.iter().map(|p| p.1).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// CSV with columns `j,i,p_ij`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["j", "i", "p_ij"])?;
        for (j, list) in self.iter() {
            for &(i, p) in list {
                w.write_record([j.to_string(), i.to_string(), p.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Baseline hazard used by the E-step: one curve per stratum, or one shared
/// by all strata.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineHazard {
    shared: Option<HazardCurve>,
    per_stratum: BTreeMap<i64, HazardCurve>,
}

impl BaselineHazard {
    pub fn shared(curve: HazardCurve) -> Self {
        BaselineHazard {
            shared: Some(curve),
            per_stratum: BTreeMap::new(),
        }
    }

    pub fn per_stratum(curves: BTreeMap<i64, HazardCurve>) -> Self {
        BaselineHazard {
            shared: None,
            per_stratum: curves,
        }
    }

    pub fn curve(&self, stratum: i64) -> Option<&HazardCurve> {
        self.per_stratum.get(&stratum).or(self.shared.as_ref())
    }

    pub fn eval(&self, stratum: i64, tau: f64) -> f64 {
        self.curve(stratum).map_or(HAZARD_FLOOR, |c| c.eval(tau))
    }

    pub fn curves(&self) -> impl Iterator<Item = (Option<i64>, &HazardCurve)> + '_ {
        self.shared
            .iter()
            .map(|c| (None, c))
            .chain(self.per_stratum.iter().map(|(&s, c)| (Some(s), c)))
    }
}

/// E-step: `p_ij` proportional to `r(beta' X_ij) lambda(tau_ij)` over the
/// candidate rows of each infectee, computed on the log scale.
pub fn infector_probabilities(
    rows: &[PairRiskRow],
    sets: &InfectiousSets,
    beta: &[f64],
    hazard: &BaselineHazard,
    spec: RelRisk,
) -> Result<InfectorWeights> {
    let mut logw: BTreeMap<u64, Vec<(u64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.candidate) {
        if !sets.contains(r.susceptible, r.infector) {
            continue;
        }
        let eta: f64 = r.covariates.iter().zip(beta).map(|(x, b)| x * b).sum();
        let ln_r = match spec {
            RelRisk::Loglinear => eta,
            RelRisk::Linear => spec.value(eta)?.ln(),
        };
        let lambda = hazard.eval(r.stratum, r.stop);
        logw.entry(r.susceptible).or_default().push((r.infector, ln_r + lambda.ln()));
    }
    let mut weights = InfectorWeights::default();
    for (j, mut list) in logw {
        list.sort_by_key(|p| p.0);
        let top = list.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = list.iter().map(|p| (p.1 - top).exp()).collect();
        let total: f64 = raw.iter().sum();
        let probs = if top.is_finite() && total.is_finite() && total > 0.0 {
            list.iter().zip(&raw).map(|(p, w)| (p.0, w / total)).collect()
        } else {
            warn!("all candidate weights of infectee {j} vanish; using uniform infector probabilities");
            let p = 1.0 / list.len() as f64;
            list.iter().map(|q| (q.0, p)).collect()
        };
        weights.set(j, probs);
    }
    Ok(weights)
}

fn weighted_data(rows: &[PairRiskRow], p: usize, weights: &InfectorWeights) -> Result<RiskData> {
    RiskData::weighted(rows, p, |j, i| weights.get(j, i).unwrap_or(0.0))
}

/// Weighted partial likelihood with event mass `p_ij` on candidate rows,
/// the expectation of `pl_v(beta)` over trees `v`.
pub fn expected_log_partial_likelihood(
    rows: &[PairRiskRow],
    weights: &InfectorWeights,
    beta: &[f64],
    spec: RelRisk,
    ties: Ties,
) -> Result<f64> {
    let data = weighted_data(rows, beta.len(), weights)?;
    Ok(data
        .evaluate(&DVector::from_column_slice(beta), spec, ties, Level::Value, false)?
        .pl)
}

fn marginal_from_eval(data: &RiskData, eval: &Eval, cov: Option<&DMatrix<f64>>) -> Result<BTreeMap<i64, StepCumHaz>> {
    let p = data.p;
    let mut out = BTreeMap::new();
    for ((s, jumps), _grad) in data.strata.iter().zip(&eval.jumps).zip(&eval.grad) {
        let times: Vec<f64> = jumps.iter().map(|j| j.time).collect();
        let increments: Vec<f64> = jumps.iter().map(|j| j.w_d / j.s0).collect();
        let cumhaz = StepCumHaz::new(times, increments)?;
        let mut dlambda = DVector::zeros(p);
        let mut doubled = 0.0;
        let mut per_infectee: BTreeMap<u64, f64> = BTreeMap::new();
        let mut sum_sq = 0.0;
        let mut variance = Vec::with_capacity(jumps.len());
        for j in jumps {
            let y2 = j.s0 * j.s0;
            doubled += 2.0 * j.w_d / y2;
            dlambda -= &j.s1 * (j.w_d / y2);
            for &k in &j.rows {
                let row = &s.rows[k];
                let a = per_infectee.entry(row.susceptible).or_insert(0.0);
                let next = *a + row.event_w / j.s0;
                sum_sq += next * next - *a * *a;
                *a = next;
            }
            let first = match cov {
                Some(c) if p > 0 => (dlambda.transpose() * c * &dlambda)[(0, 0)],
                _ => 0.0,
            };
            variance.push(first + doubled - sum_sq);
        }
        out.insert(s.label, cumhaz.with_variance(variance)?);
    }
    Ok(out)
}

/// Marginal Breslow estimate: jumps `p_ij / Y(beta, tau_ij)` at every
/// candidate contact interval, per stratum.
pub fn marginal_breslow(
    rows: &[PairRiskRow],
    weights: &InfectorWeights,
    beta: &[f64],
    spec: RelRisk,
) -> Result<BTreeMap<i64, StepCumHaz>> {
    let data = weighted_data(rows, beta.len(), weights)?;
    let eval = data.evaluate(&DVector::from_column_slice(beta), spec, Ties::Breslow, Level::Score, true)?;
    let mut out = BTreeMap::new();
    for (s, jumps) in data.strata.iter().zip(&eval.jumps) {
        let times = jumps.iter().map(|j| j.time).collect();
        let increments = jumps.iter().map(|j| j.w_d / j.s0).collect();
        out.insert(s.label, StepCumHaz::new(times, increments)?);
    }
    Ok(out)
}

/// Louis decomposition of the observed-data information.
#[derive(Debug, Clone)]
pub struct LouisInformation {
    /// Expected complete-data information (weighted observed information).
    pub term1: DMatrix<f64>,
    /// Conditional covariance of the complete-data score over trees.
    pub term2: DMatrix<f64>,
    pub total: DMatrix<f64>,
}

fn louis_from_eval(data: &RiskData, eval: &Eval) -> LouisInformation {
    let p = data.p;
    let mut squares = DMatrix::zeros(p, p);
    let mut by_infectee: BTreeMap<u64, DVector<f64>> = BTreeMap::new();
    for ((s, jumps), grad) in data.strata.iter().zip(&eval.jumps).zip(&eval.grad) {
        for j in jumps {
            for &k in &j.rows {
                let e = s.rows[k].event_w;
                let u = DVector::from_column_slice(&grad[k * p..(k + 1) * p]) - &j.ebar;
                squares += &u * u.transpose() * e;
                *by_infectee
                    .entry(s.rows[k].susceptible)
                    .or_insert_with(|| DVector::zeros(p)) += u * e;
            }
        }
    }
    let mut term2 = squares;
    for u in by_infectee.values() {
        term2 -= u * u.transpose();
    }
    let term1 = eval.observed.clone();
    let total = &term1 - &term2;
    LouisInformation { term1, term2, total }
}

/// Observed information of the observed-data partial likelihood at `beta`.
pub fn louis_information(
    rows: &[PairRiskRow],
    weights: &InfectorWeights,
    beta: &[f64],
    spec: RelRisk,
    ties: Ties,
) -> Result<LouisInformation> {
    let data = weighted_data(rows, beta.len(), weights)?;
    let eval = data.evaluate(&DVector::from_column_slice(beta), spec, ties, Level::Full, true)?;
    Ok(louis_from_eval(&data, &eval))
}

/// Marginal baseline per stratum with variance
/// `dL' cov dL + 2 sum dN / Y^2 - sum_j (sum dN_j / Y)^2`; the first term
/// is dropped when `cov` is absent.
pub fn marginal_baseline_variance(
    rows: &[PairRiskRow],
    weights: &InfectorWeights,
    beta: &[f64],
    cov: Option<&DMatrix<f64>>,
    spec: RelRisk,
    ties: Ties,
) -> Result<BTreeMap<i64, StepCumHaz>> {
    let data = weighted_data(rows, beta.len(), weights)?;
    let eval = data.evaluate(&DVector::from_column_slice(beta), spec, ties, Level::Score, true)?;
    marginal_from_eval(&data, &eval, cov)
}

#[derive(Debug, Clone)]
pub struct EmOptions {
    pub relrisk: RelRisk,
    pub ties: Ties,
    pub smooth: SmoothOptions,
    pub min_iter: usize,
    pub max_iter: usize,
    /// Threshold on the change in expected log likelihood.
    pub loglik_tol: f64,
    pub beta_tol: f64,
    pub cumhaz_tol: f64,
    /// Keep `beta = 0` throughout (the homogeneous model).
    pub freeze_beta: bool,
    pub newton_max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            relrisk: RelRisk::Loglinear,
            ties: Ties::Efron,
            smooth: SmoothOptions::default(),
            min_iter: 2,
            max_iter: 25,
            loglik_tol: 0.002,
            beta_tol: 1e-3,
            cumhaz_tol: 1e-3,
            freeze_beta: false,
            newton_max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EmTraceRow {
    pub iteration: usize,
    /// Expected log partial likelihood after CM1.
    pub expected_loglik: f64,
    /// The same, at the warm start of CM1.
    pub warm_start_loglik: f64,
    pub delta_loglik: f64,
    pub max_abs_delta_beta: f64,
    pub sup_delta_cumhaz: f64,
    pub newton_iterations: usize,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmFitResult {
    pub covariate_names: Vec<String>,
    pub relrisk: RelRisk,
    pub ties: Ties,
    pub beta_tilde: DVector<f64>,
    /// Inverse Louis information; empty when `beta` is frozen.
    pub cov_beta: DMatrix<f64>,
    pub louis: Option<LouisInformation>,
    /// Expected log partial likelihood at `beta_tilde` under the final weights.
    pub loglik: f64,
    pub marginal_baseline: BTreeMap<i64, StepCumHaz>,
    pub hazard: BaselineHazard,
    pub weights: InfectorWeights,
    pub em_iterations: usize,
    pub converged: bool,
    pub trace: Vec<EmTraceRow>,
    pub refit_iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EmReport {
    pub relrisk: RelRisk,
    pub ties: Ties,
    pub loglik: f64,
    pub em_iterations: usize,
    pub converged: bool,
    pub refit_iterations: usize,
    pub alpha: f64,
    pub coefficients: Vec<CoefficientRow>,
    pub baseline: Vec<StratumBaseline>,
    pub trace: Vec<EmTraceRow>,
}

impl EmFitResult {
    pub fn wald_ci(&self, k: usize, alpha: f64) -> (f64, f64) {
        crate::complete::wald_interval(self.beta_tilde[k], self.cov_beta[(k, k)], alpha)
    }

    pub fn report(&self, alpha: f64) -> EmReport {
        EmReport {
            relrisk: self.relrisk,
            ties: self.ties,
            loglik: self.loglik,
            em_iterations: self.em_iterations,
            converged: self.converged,
            refit_iterations: self.refit_iterations,
            alpha,
            coefficients: if self.cov_beta.nrows() == self.beta_tilde.len() {
                coefficient_table(&self.covariate_names, &self.beta_tilde, &self.cov_beta, alpha)
            } else {
                Vec::new()
            },
            baseline: baseline_tables(&self.marginal_baseline, alpha),
            trace: self.trace.clone(),
        }
    }
}

/// Crude rate: infectees per unit of pair time at risk.
fn crude_rate(rows: &[PairRiskRow], sets: &InfectiousSets) -> f64 {
    let exposure: f64 = rows.iter().map(|r| r.weight * (r.stop - r.start)).sum();
    let infectees = sets.iter().filter(|(_, s)| !s.is_empty()).count();
    infectees as f64 / exposure
}

fn smooth_all(cumhaz: &BTreeMap<i64, StepCumHaz>, previous: &BaselineHazard, opts: &SmoothOptions) -> Result<BaselineHazard> {
    let mut curves = BTreeMap::new();
    for (&s, h) in cumhaz {
        let curve = if h.is_empty() {
            match previous.curve(s) {
                Some(c) => c.clone(),
                None => continue,
            }
        } else {
            smooth_hazard(h, opts)?
        };
        curves.insert(s, curve);
    }
    Ok(BaselineHazard::per_stratum(curves))
}

fn sup_distance(a: &BTreeMap<i64, StepCumHaz>, b: &BTreeMap<i64, StepCumHaz>) -> f64 {
    let empty = StepCumHaz::default();
    a.keys()
        .chain(b.keys())
        .map(|s| a.get(s).unwrap_or(&empty).sup_distance(b.get(s).unwrap_or(&empty)))
        .fold(0.0, f64::max)
}

/// The ECM algorithm for `beta` and the baseline with unknown infectors.
pub fn ecm_fit(table: &PairTable, opts: &EmOptions) -> Result<EmFitResult> {
    let rows = &table.rows;
    let sets = &table.infectious_sets;
    let p = table.covariate_names.len();
    let spec = opts.relrisk;
    if sets.total_candidates() == 0 {
        return Err(Error::NoEvents);
    }
    if opts.min_iter > opts.max_iter || opts.max_iter == 0 {
        return Err(Error::InvalidParameter("EM iteration bounds are inconsistent".into()));
    }
    let support = table.max_stop();
    let smooth_opts = SmoothOptions {
        support: Some(opts.smooth.support.unwrap_or(support)),
        ..opts.smooth
    };
    let mut hazard = BaselineHazard::shared(HazardCurve::constant(crude_rate(rows, sets), support));
    let mut beta = DVector::zeros(p);
    let mut cumhaz: Option<BTreeMap<i64, StepCumHaz>> = None;
    let mut prev_ell = f64::NAN;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut weights = InfectorWeights::default();

    for iteration in 1..=opts.max_iter {
        weights = infector_probabilities(rows, sets, beta.as_slice(), &hazard, spec)?;
        let data = weighted_data(rows, p, &weights)?;
        let warm = data.evaluate(&beta, spec, opts.ties, Level::Value, false)?.pl;
        let (next, newton_iterations) = if opts.freeze_beta || p == 0 {
            (beta.clone(), 0)
        } else {
            let out = newton(&data, spec, opts.ties, beta.clone(), opts.newton_max_iter)?;
            (out.beta, out.iterations)
        };
        let eval = data.evaluate(&next, spec, Ties::Breslow, Level::Score, true)?;
        let ell = if opts.ties == Ties::Breslow {
            eval.pl
        } else {
            data.evaluate(&next, spec, opts.ties, Level::Value, false)?.pl
        };
        let new_cumhaz = marginal_from_eval(&data, &eval, None)?;
        let d_beta = if p == 0 { 0.0 } else { (&next - &beta).amax() };
        let d_cumhaz = cumhaz.as_ref().map_or(f64::INFINITY, |old| sup_distance(old, &new_cumhaz));
        let d_ell = (ell - prev_ell).abs();
        debug!("EM iteration {iteration}: ell {ell:.6}, |dbeta| {d_beta:.2e}, sup|dLambda| {d_cumhaz:.2e}");
        trace.push(EmTraceRow {
            iteration,
            expected_loglik: ell,
            warm_start_loglik: warm,
            delta_loglik: d_ell,
            max_abs_delta_beta: d_beta,
            sup_delta_cumhaz: d_cumhaz,
            newton_iterations,
            beta: next.iter().copied().collect(),
        });
        hazard = smooth_all(&new_cumhaz, &hazard, &smooth_opts)?;
        beta = next;
        cumhaz = Some(new_cumhaz);
        prev_ell = ell;
        if iteration >= opts.min_iter
            && d_ell < opts.loglik_tol
            && d_beta < opts.beta_tol
            && d_cumhaz < opts.cumhaz_tol
        {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("EM did not converge in {} iterations", opts.max_iter);
    }

    let data = weighted_data(rows, p, &weights)?;
    let (beta_tilde, refit_iterations) = if opts.freeze_beta || p == 0 {
        (DVector::zeros(p), 0)
    } else {
        let out = newton(&data, spec, opts.ties, DVector::zeros(p), opts.newton_max_iter)?;
        (out.beta, out.iterations)
    };
    let eval = data.evaluate(&beta_tilde, spec, opts.ties, Level::Full, true)?;
    let (louis, cov_beta) = if opts.freeze_beta || p == 0 {
        (None, DMatrix::zeros(0, 0))
    } else {
        let louis = louis_from_eval(&data, &eval);
        let cov = invert_information(&louis.total)?;
        (Some(louis), cov)
    };
    let cov_for_baseline = (cov_beta.nrows() == p && p > 0).then_some(&cov_beta);
    let breslow_eval = data.evaluate(&beta_tilde, spec, Ties::Breslow, Level::Score, true)?;
    let marginal_baseline = marginal_from_eval(&data, &breslow_eval, cov_for_baseline)?;
    Ok(EmFitResult {
        covariate_names: table.covariate_names.clone(),
        relrisk: spec,
        ties: opts.ties,
        loglik: eval.pl,
        beta_tilde,
        cov_beta,
        louis,
        marginal_baseline,
        hazard,
        weights,
        em_iterations: trace.len(),
        converged,
        trace,
        refit_iterations,
    })
}

/// The homogeneous model: `ecm_fit` with `beta` frozen at 0.
pub fn marginal_nelson_aalen(table: &PairTable, opts: &EmOptions) -> Result<EmFitResult> {
    let frozen = EmOptions {
        freeze_beta: true,
        ..opts.clone()
    };
    ecm_fit(table, &frozen)
}
