//! Monte Carlo coverage of the complete-data and EM estimators on simulated
//! epidemics.

use std::fmt;
use std::fs::File;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complete::{maximize, FitOptions};
use crate::data::AnalysisMode;
use crate::em::{ecm_fit, EmOptions, SmoothOptions};
use crate::error::{Error, Result};
use crate::sim::{simulate_epidemic, EpidemicConfig};

pub const PARAM_NAMES: [&str; 3] = ["inf", "sus", "pair"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    Inf,
    Sus,
    Pair,
}

impl Param {
    pub fn index(self) -> usize {
        match self {
            Param::Inf => 0,
            Param::Sus => 1,
            Param::Pair => 2,
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(PARAM_NAMES[self.index()])
    }
}

/// One design cell: baseline Weibull law, the coefficient drawn from
/// Uniform(-1, 1), and the fixed value of the other two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub weibull_shape: f64,
    pub weibull_rate: f64,
    pub varied: Param,
    #[serde(default)]
    pub others: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub n_nodes: usize,
    pub ws_neighbors: usize,
    pub rewire_prob: f64,
    pub infections: usize,
    pub replicates: usize,
    pub seed: u64,
    pub alpha: f64,
    pub quantiles: Vec<f64>,
    /// Simulation attempts per replicate before giving up on epidemics that
    /// die out early.
    pub max_attempts: usize,
    pub bandwidth: Option<f64>,
    pub cells: Vec<CellSpec>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let mut cells = Vec::new();
        for (shape, rate) in [(0.5, 0.2), (2.0, 0.6)] {
            for varied in [Param::Inf, Param::Sus, Param::Pair] {
                cells.push(CellSpec {
                    weibull_shape: shape,
                    weibull_rate: rate,
                    varied,
                    others: 0.0,
                });
            }
        }
        StudyConfig {
            n_nodes: 2000,
            ws_neighbors: 10,
            rewire_prob: 0.1,
            infections: 300,
            replicates: 200,
            seed: 2024,
            alpha: 0.05,
            quantiles: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            max_attempts: 50,
            bandwidth: None,
            cells,
        }
    }
}

/// Estimates of one fitted model in one replicate.
#[derive(Debug, Clone, Serialize)]
pub struct Estimates {
    pub beta: [f64; 3],
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    /// Baseline estimate and limits at each quantile.
    pub cumhaz: Vec<f64>,
    pub cumhaz_lo: Vec<f64>,
    pub cumhaz_hi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateResult {
    pub cell: usize,
    pub replicate: usize,
    pub seed: u64,
    pub attempts: usize,
    pub true_beta: [f64; 3],
    pub quantile_taus: Vec<f64>,
    pub true_cumhaz: Vec<f64>,
    pub complete: Option<Estimates>,
    pub em: Option<Estimates>,
    pub em_iterations: usize,
    pub em_converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaCoverageRow {
    pub cell: usize,
    pub weibull_shape: f64,
    pub varied: Param,
    pub param: Param,
    pub estimator: &'static str,
    pub n: usize,
    pub coverage: f64,
    pub mean_width: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineCoverageRow {
    pub weibull_shape: f64,
    pub estimator: &'static str,
    pub quantile: f64,
    pub n: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WidthRow {
    pub cell: usize,
    pub replicate: usize,
    pub weibull_shape: f64,
    pub param: Param,
    pub width_hat: f64,
    pub width_tilde: f64,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub replicates: Vec<ReplicateResult>,
}

/// SplitMix64 step, used to derive independent replicate seeds.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn replicate_seed(study_seed: u64, cell: usize, replicate: usize, attempt: usize) -> u64 {
    splitmix(splitmix(splitmix(study_seed ^ cell as u64) ^ replicate as u64) ^ attempt as u64)
}

fn extract(beta: &[f64], lohi: impl Fn(usize) -> (f64, f64)) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let mut b = [0.0; 3];
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for k in 0..3 {
        b[k] = beta[k];
        (lo[k], hi[k]) = lohi(k);
    }
    (b, lo, hi)
}

fn run_replicate(cfg: &StudyConfig, cell_index: usize, replicate: usize) -> ReplicateResult {
    let cell = cfg.cells[cell_index];
    let mut attempts = 0;
    let mut seed = 0;
    let mut true_beta = [cell.others; 3];
    let failure = |msg: String, attempts, seed, true_beta| ReplicateResult {
        cell: cell_index,
        replicate,
        seed,
        attempts,
        true_beta,
        quantile_taus: Vec::new(),
        true_cumhaz: Vec::new(),
        complete: None,
        em: None,
        em_iterations: 0,
        em_converged: false,
        error: Some(msg),
    };
    let sim = loop {
        attempts += 1;
        if attempts > cfg.max_attempts {
            return failure("epidemic died out in every attempt".into(), attempts - 1, seed, true_beta);
        }
        seed = replicate_seed(cfg.seed, cell_index, replicate, attempts - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        true_beta = [cell.others; 3];
        true_beta[cell.varied.index()] = rng.random_range(-1.0..1.0);
        let ecfg = EpidemicConfig {
            n_nodes: cfg.n_nodes,
            ws_neighbors: cfg.ws_neighbors,
            rewire_prob: cfg.rewire_prob,
            weibull_shape: cell.weibull_shape,
            weibull_rate: cell.weibull_rate,
            beta: true_beta,
            stop_after_infections: cfg.infections,
            seed: rng.random(),
            ..EpidemicConfig::default()
        };
        match simulate_epidemic(&ecfg) {
            Ok(s) if s.reached_target => break s,
            Ok(_) => continue,
            Err(e) => return failure(e.to_string(), attempts, seed, true_beta),
        }
    };
    let truth_cfg = &sim.config;

    let mut out = ReplicateResult {
        cell: cell_index,
        replicate,
        seed,
        attempts,
        true_beta,
        quantile_taus: Vec::new(),
        true_cumhaz: Vec::new(),
        complete: None,
        em: None,
        em_iterations: 0,
        em_converged: false,
        error: None,
    };
    let mut errors = Vec::new();

    match sim.pair_table(AnalysisMode::CompleteData) {
        Ok(table) => {
            out.quantile_taus = table.contact_interval_quantiles(&cfg.quantiles);
            out.true_cumhaz = out.quantile_taus.iter().map(|&t| truth_cfg.cumhaz(t)).collect();
            match maximize(&table.rows, &table.covariate_names, &FitOptions::default()) {
                Ok(fit) => {
                    let (beta, lo, hi) = extract(fit.beta_hat.as_slice(), |k| fit.wald_ci(k, cfg.alpha));
                    let h = &fit.baseline[&0];
                    let pts: Vec<_> = out.quantile_taus.iter().map(|&t| h.point(t, cfg.alpha)).collect();
                    out.complete = Some(Estimates {
                        beta,
                        lo,
                        hi,
                        cumhaz: pts.iter().map(|p| p.cumhaz).collect(),
                        cumhaz_lo: pts.iter().map(|p| p.lo).collect(),
                        cumhaz_hi: pts.iter().map(|p| p.hi).collect(),
                    });
                }
                Err(e) => errors.push(format!("complete fit: {e}")),
            }
        }
        Err(e) => errors.push(format!("complete rows: {e}")),
    }

    let em_opts = EmOptions {
        smooth: SmoothOptions {
            bandwidth: cfg.bandwidth,
            ..SmoothOptions::default()
        },
        ..EmOptions::default()
    };
    match sim.pair_table(AnalysisMode::UnknownInfector).and_then(|t| ecm_fit(&t, &em_opts)) {
        Ok(fit) => {
            let (beta, lo, hi) = extract(fit.beta_tilde.as_slice(), |k| fit.wald_ci(k, cfg.alpha));
            let h = &fit.marginal_baseline[&0];
            let pts: Vec<_> = out.quantile_taus.iter().map(|&t| h.point(t, cfg.alpha)).collect();
            out.em = Some(Estimates {
                beta,
                lo,
                hi,
                cumhaz: pts.iter().map(|p| p.cumhaz).collect(),
                cumhaz_lo: pts.iter().map(|p| p.lo).collect(),
                cumhaz_hi: pts.iter().map(|p| p.hi).collect(),
            });
            out.em_iterations = fit.em_iterations;
            out.em_converged = fit.converged;
        }
        Err(e) => errors.push(format!("EM fit: {e}")),
    }
    if !errors.is_empty() {
        warn!("cell {cell_index} replicate {replicate}: {}", errors.join("; "));
        out.error = Some(errors.join("; "));
    }
    out
}

/// Runs every replicate of every cell on a pool of `jobs` threads.
pub fn run_coverage_study(config: &StudyConfig, jobs: usize) -> Result<StudyResult> {
    if config.cells.is_empty() || config.replicates == 0 {
        return Err(Error::InvalidParameter("study needs at least one cell and one replicate".into()));
    }
    if config.quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
        return Err(Error::InvalidParameter("quantiles must lie in [0, 1]".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let tasks: Vec<(usize, usize)> = (0..config.cells.len())
        .flat_map(|c| (0..config.replicates).map(move |r| (c, r)))
        .collect();
    info!("running {} replicates on {} threads", tasks.len(), jobs.max(1));
    let replicates = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, r)| run_replicate(config, c, r))
            .collect::<Vec<_>>()
    });
    Ok(StudyResult {
        config: config.clone(),
        replicates,
    })
}

fn covers(lo: f64, hi: f64, truth: f64) -> bool {
    lo <= truth && truth <= hi
}

fn estimator(rep: &ReplicateResult, tilde: bool) -> Option<&Estimates> {
    if tilde {
        rep.em.as_ref()
    } else {
        rep.complete.as_ref()
    }
}

impl StudyResult {
    pub fn beta_coverage(&self) -> Vec<BetaCoverageRow> {
        let mut rows = Vec::new();
        for (c, cell) in self.config.cells.iter().enumerate() {
            for param in [Param::Inf, Param::Sus, Param::Pair] {
                let k = param.index();
                for (name, tilde) in [("hat", false), ("tilde", true)] {
                    let fits: Vec<(&Estimates, f64)> = self
                        .replicates
                        .iter()
                        .filter(|r| r.cell == c)
                        .filter_map(|r| estimator(r, tilde).map(|e| (e, r.true_beta[k])))
                        .collect();
                    let n = fits.len();
                    let hit = fits.iter().filter(|(e, t)| covers(e.lo[k], e.hi[k], *t)).count();
                    let width: f64 = fits.iter().map(|(e, _)| e.hi[k] - e.lo[k]).sum();
                    rows.push(BetaCoverageRow {
                        cell: c,
                        weibull_shape: cell.weibull_shape,
                        varied: cell.varied,
                        param,
                        estimator: name,
                        n,
                        coverage: hit as f64 / n as f64,
                        mean_width: width / n as f64,
                    });
                }
            }
        }
        rows
    }

    /// Pointwise baseline coverage pooled over the cells sharing a shape.
    pub fn baseline_coverage(&self) -> Vec<BaselineCoverageRow> {
        let mut shapes: Vec<f64> = self.config.cells.iter().map(|c| c.weibull_shape).collect();
        shapes.sort_by(f64::total_cmp);
        shapes.dedup();
        let mut rows = Vec::new();
        for shape in shapes {
            for (name, tilde) in [("hat", false), ("tilde", true)] {
                for (q_index, &q) in self.config.quantiles.iter().enumerate() {
                    let mut n = 0;
                    let mut hit = 0;
                    for rep in &self.replicates {
                        if self.config.cells[rep.cell].weibull_shape != shape {
                            continue;
                        }
                        if let Some(e) = estimator(rep, tilde) {
                            n += 1;
                            if covers(e.cumhaz_lo[q_index], e.cumhaz_hi[q_index], rep.true_cumhaz[q_index]) {
                                hit += 1;
                            }
                        }
                    }
                    rows.push(BaselineCoverageRow {
                        weibull_shape: shape,
                        estimator: name,
                        quantile: q,
                        n,
                        coverage: hit as f64 / n as f64,
                    });
                }
            }
        }
        rows
    }

    /// Paired CI widths for replicates with both fits.
    pub fn ci_widths(&self) -> Vec<WidthRow> {
        let mut rows = Vec::new();
        for rep in &self.replicates {
            let (Some(h), Some(t)) = (&rep.complete, &rep.em) else { continue };
            for param in [Param::Inf, Param::Sus, Param::Pair] {
                let k = param.index();
                rows.push(WidthRow {
                    cell: rep.cell,
                    replicate: rep.replicate,
                    weibull_shape: self.config.cells[rep.cell].weibull_shape,
                    param,
                    width_hat: h.hi[k] - h.lo[k],
                    width_tilde: t.hi[k] - t.lo[k],
                });
            }
        }
        rows
    }

    pub fn em_iterations(&self) -> Vec<(usize, bool)> {
        self.replicates
            .iter()
            .filter(|r| r.em.is_some())
            .map(|r| (r.em_iterations, r.em_converged))
            .collect()
    }

    pub fn failures(&self) -> usize {
        self.replicates.iter().filter(|r| r.error.is_some()).count()
    }

    /// Writes `coverage_beta.csv`, `coverage_baseline.csv`, `ci_widths.csv`,
    /// and `replicates.csv` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_writer(File::create(dir.join("coverage_beta.csv"))?);
        for row in self.beta_coverage() {
            w.serialize(row)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_writer(File::create(dir.join("coverage_baseline.csv"))?);
        for row in self.baseline_coverage() {
            w.serialize(row)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_writer(File::create(dir.join("ci_widths.csv"))?);
        for row in self.ci_widths() {
            w.serialize(row)?;
        }
        w.flush()?;
        self.write_replicates(&mut csv::Writer::from_writer(File::create(dir.join("replicates.csv"))?))
    }

    fn write_replicates<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let mut header: Vec<String> = ["cell", "replicate", "seed", "attempts", "estimator"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for p in PARAM_NAMES {
            header.extend([format!("true_{p}"), format!("beta_{p}"), format!("lo_{p}"), format!("hi_{p}")]);
        }
        for q in &self.config.quantiles {
            header.extend([
                format!("tau_q{q}"),
                format!("true_q{q}"),
                format!("cumhaz_q{q}"),
                format!("lo_q{q}"),
                format!("hi_q{q}"),
            ]);
        }
        header.extend(["em_iterations".to_string(), "em_converged".into(), "error".into()]);
        w.write_record(&header)?;
        for rep in &self.replicates {
            for (name, tilde) in [("hat", false), ("tilde", true)] {
                let est = estimator(rep, tilde);
                let mut rec = vec![
                    rep.cell.to_string(),
                    rep.replicate.to_string(),
                    rep.seed.to_string(),
                    rep.attempts.to_string(),
                    name.to_string(),
                ];
                let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                for k in 0..3 {
                    rec.push(rep.true_beta[k].to_string());
                    rec.push(num(est.map(|e| e.beta[k])));
                    rec.push(num(est.map(|e| e.lo[k])));
                    rec.push(num(est.map(|e| e.hi[k])));
                }
                for q in 0..self.config.quantiles.len() {
                    rec.push(num(rep.quantile_taus.get(q).copied()));
                    rec.push(num(rep.true_cumhaz.get(q).copied()));
                    rec.push(num(est.map(|e| e.cumhaz[q])));
                    rec.push(num(est.map(|e| e.cumhaz_lo[q])));
                    rec.push(num(est.map(|e| e.cumhaz_hi[q])));
                }
                rec.push(if tilde { rep.em_iterations.to_string() } else { String::new() });
                rec.push(if tilde { rep.em_converged.to_string() } else { String::new() });
                rec.push(rep.error.clone().unwrap_or_default());
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
