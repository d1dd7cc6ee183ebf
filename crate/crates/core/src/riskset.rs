//! Risk-set sweep shared by the complete-data and EM fits.
//!
//! Each row carries a risk weight (its contribution to the sums over the
//! risk set) and an event weight (its mass in `dN`). Complete data has both
//! equal to the row weight on event rows; the EM path keeps risk weight 1 on
//! candidate rows and puts the infector probability in the event weight,
//! which is the weighted-copies model with the two copies merged.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::PairRiskRow;
use crate::error::{Error, Result};
use crate::relrisk::RelRisk;

/// Handling of tied event times within a stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ties {
    #[default]
    Efron,
    Breslow,
}

impl fmt::Display for Ties {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ties::Efron => "efron",
            Ties::Breslow => "breslow",
        })
    }
}

impl FromStr for Ties {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "efron" => Ok(Ties::Efron),
            "breslow" => Ok(Ties::Breslow),
            other => Err(Error::InvalidParameter(format!("unknown tie policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RiskRow {
    pub susceptible: u64,
    pub start: f64,
    pub stop: f64,
    pub risk_w: f64,
    pub event_w: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Stratum {
    pub label: i64,
    pub rows: Vec<RiskRow>,
    /// Row-major covariates, `rows.len() * p`.
    pub x: Vec<f64>,
    /// Left-truncated rows by decreasing start.
    by_start_desc: Vec<usize>,
    /// Distinct event times, increasing, with their event rows.
    pub events: Vec<(f64, Vec<usize>)>,
    /// Efron tie count per event time: distinct pairs, so weighted copies
    /// of one pair count once.
    tie_counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct RiskData {
    pub p: usize,
    pub strata: Vec<Stratum>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Level {
    Value,
    Score,
    Full,
}

/// Risk-set summaries at one event time.
#[derive(Debug, Clone)]
pub(crate) struct Jump {
    pub time: f64,
    /// Total event mass at `time`.
    pub w_d: f64,
    pub s0: f64,
    pub s1: DVector<f64>,
    /// Risk-weighted mean of `d ln r / d beta`, averaged over the Efron
    /// sequence when ties are present.
    pub ebar: DVector<f64>,
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Eval {
    pub pl: f64,
    pub score: DVector<f64>,
    pub observed: DMatrix<f64>,
    pub expected: DMatrix<f64>,
    /// Per stratum, in increasing time, when requested.
    pub jumps: Vec<Vec<Jump>>,
    /// Per stratum, `d ln r / d beta` of every row (row-major), when jumps
    /// are requested.
    pub grad: Vec<Vec<f64>>,
}

impl RiskData {
    /// Complete-data weighting: event rows carry their row weight as `dN`.
    pub fn complete(rows: &[PairRiskRow], p: usize) -> Result<Self> {
        Self::build(rows, p, |r| if r.event { r.weight } else { 0.0 })
    }

    /// EM weighting: candidate rows carry `weight * p_ij` as `dN`.
    pub fn weighted(rows: &[PairRiskRow], p: usize, prob: impl Fn(u64, u64) -> f64) -> Result<Self> {
        Self::build(rows, p, |r| {
            if r.candidate {
                r.weight * prob(r.susceptible, r.infector)
            } else {
                0.0
            }
        })
    }

    fn build(rows: &[PairRiskRow], p: usize, event_w: impl Fn(&PairRiskRow) -> f64) -> Result<Self> {
        let mut groups: BTreeMap<i64, Vec<&PairRiskRow>> = BTreeMap::new();
        for r in rows {
            if r.covariates.len() != p {
                return Err(Error::InvalidData(format!(
                    "row ({}, {}) has {} covariates, expected {p}",
                    r.infector,
                    r.susceptible,
                    r.covariates.len()
                )));
            }
            if !(r.start >= 0.0 && r.stop > r.start && r.stop.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "row ({}, {}) has invalid interval ({}, {}]",
                    r.infector, r.susceptible, r.start, r.stop
                )));
            }
            if !(0.0..=1.0).contains(&r.weight) {
                return Err(Error::InvalidData(format!("row weight {} outside [0, 1]", r.weight)));
            }
            if r.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "row ({}, {}) has a non-finite covariate",
                    r.infector, r.susceptible
                )));
            }
            groups.entry(r.stratum).or_default().push(r);
        }
        let mut strata = Vec::with_capacity(groups.len());
        for (label, mut members) in groups {
            members.sort_by(|a, b| {
                a.stop
                    .total_cmp(&b.stop)
                    .then(a.start.total_cmp(&b.start))
                    .then(a.infector.cmp(&b.infector))
                    .then(a.susceptible.cmp(&b.susceptible))
            });
            let mut out_rows = Vec::with_capacity(members.len());
            let mut x = Vec::with_capacity(members.len() * p);
            for r in &members {
                let e = event_w(r);
                if !(e >= 0.0 && e <= r.weight) {
                    return Err(Error::InvalidData(format!("event weight {e} outside [0, row weight]")));
                }
                out_rows.push(RiskRow {
                    susceptible: r.susceptible,
                    start: r.start,
                    stop: r.stop,
                    risk_w: r.weight,
                    event_w: e,
                });
                x.extend_from_slice(&r.covariates);
            }
            let mut by_start_desc: Vec<usize> = (0..out_rows.len()).filter(|&k| out_rows[k].start > 0.0).collect();
            by_start_desc.sort_by(|&a, &b| out_rows[b].start.total_cmp(&out_rows[a].start).then(b.cmp(&a)));
            let mut events: Vec<(f64, Vec<usize>)> = Vec::new();
            let mut tie_counts: Vec<usize> = Vec::new();
            let mut last_pair = None;
            for (k, r) in out_rows.iter().enumerate() {
                if r.event_w > 0.0 {
                    let pair = (members[k].infector, members[k].susceptible);
                    match events.last_mut() {
                        Some((t, list)) if *t == r.stop => {
                            list.push(k);
                            if last_pair != Some(pair) {
                                *tie_counts.last_mut().unwrap() += 1;
                            }
                        }
                        _ => {
                            events.push((r.stop, vec![k]));
                            tie_counts.push(1);
                        }
                    }
                    last_pair = Some(pair);
                }
            }
            strata.push(Stratum {
                label,
                rows: out_rows,
                x,
                by_start_desc,
                events,
                tie_counts,
            });
        }
        Ok(RiskData { p, strata })
    }

    pub fn total_event_mass(&self) -> f64 {
        self.strata
            .iter()
            .flat_map(|s| s.rows.iter())
            .map(|r| r.event_w)
            .sum()
    }

    pub fn n_rows(&self) -> usize {
        self.strata.iter().map(|s| s.rows.len()).sum()
    }

    /// Largest step `s <= 1` keeping `1 + (beta + s d)'x > 1e-10` on every row.
    pub fn linear_step_bound(&self, beta: &DVector<f64>, dir: &DVector<f64>) -> f64 {
        let p = self.p;
        let mut bound = f64::INFINITY;
        for s in &self.strata {
            for x in s.x.chunks_exact(p.max(1)).take(s.rows.len()) {
                let (mut eta, mut slope) = (0.0, 0.0);
                for k in 0..p {
                    eta += beta[k] * x[k];
                    slope += dir[k] * x[k];
                }
                if slope < 0.0 {
                    bound = bound.min((1.0 + eta - 1e-10) / -slope);
                }
            }
        }
        bound
    }

    pub fn evaluate(&self, beta: &DVector<f64>, spec: RelRisk, ties: Ties, level: Level, record: bool) -> Result<Eval> {
        let p = self.p;
        let mut out = Eval {
            pl: 0.0,
            score: DVector::zeros(p),
            observed: DMatrix::zeros(p, p),
            expected: DMatrix::zeros(p, p),
            jumps: Vec::new(),
            grad: Vec::new(),
        };
        for s in &self.strata {
            sweep(s, p, beta, spec, ties, level, record, &mut out)?;
        }
        Ok(out)
    }
}

#[derive(Clone)]
struct Sums {
    s0: f64,
    s1: Vec<f64>,
    s2: Vec<f64>,
    s2h: Vec<f64>,
}

impl Sums {
    fn new(p: usize) -> Self {
        Sums {
            s0: 0.0,
            s1: vec![0.0; p],
            s2: vec![0.0; p * p],
            s2h: vec![0.0; p * p],
        }
    }

    /// Adds `w * (1, g, g g', h x x')` to the sums.
    fn add(&mut self, w: f64, g: &[f64], x: &[f64], h: f64, level: Level) {
        self.s0 += w;
        if level == Level::Value {
            return;
        }
        let p = g.len();
        for a in 0..p {
            self.s1[a] += w * g[a];
        }
        if level == Level::Full {
            for a in 0..p {
                for b in 0..p {
                    self.s2[a * p + b] += w * g[a] * g[b];
                    self.s2h[a * p + b] += w * h * x[a] * x[b];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    s: &Stratum,
    p: usize,
    beta: &DVector<f64>,
    spec: RelRisk,
    ties: Ties,
    level: Level,
    record: bool,
    out: &mut Eval,
) -> Result<()> {
    let n = s.rows.len();
    let mut r = vec![0.0; n];
    let mut ln_r = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut g = vec![0.0; n * p];
    for k in 0..n {
        let x = &s.x[k * p..(k + 1) * p];
        let eta: f64 = (0..p).map(|a| beta[a] * x[a]).sum();
        r[k] = spec.value(eta)?;
        ln_r[k] = match spec {
            RelRisk::Loglinear => eta,
            RelRisk::Linear => r[k].ln(),
        };
        let dl = spec.dlog(eta)?;
        h[k] = spec.d2log(eta)?;
        for a in 0..p {
            g[k * p + a] = dl * x[a];
        }
    }

    let mut sums = Sums::new(p);
    let mut added = n;
    let mut removed = 0;
    let mut jumps = Vec::with_capacity(if record { s.events.len() } else { 0 });
    for ((time, event_rows), &tie_count) in s.events.iter().zip(&s.tie_counts).rev() {
        let u = *time;
        while added > 0 && s.rows[added - 1].stop >= u {
            added -= 1;
            let k = added;
            let x = &s.x[k * p..(k + 1) * p];
            sums.add(s.rows[k].risk_w * r[k], &g[k * p..(k + 1) * p], x, h[k], level);
        }
        while removed < s.by_start_desc.len() && s.rows[s.by_start_desc[removed]].start >= u {
            let k = s.by_start_desc[removed];
            removed += 1;
            let x = &s.x[k * p..(k + 1) * p];
            sums.add(-s.rows[k].risk_w * r[k], &g[k * p..(k + 1) * p], x, h[k], level);
        }
        if !(sums.s0 > 0.0) {
            return Err(Error::EmptyRiskSet(u));
        }

        let mut tied = Sums::new(p);
        let mut w_d = 0.0;
        let mut e_ln_r = 0.0;
        let mut e_g = vec![0.0; p];
        let mut e_h = vec![0.0; p * p];
        for &k in event_rows {
            let e = s.rows[k].event_w;
            let x = &s.x[k * p..(k + 1) * p];
            let gk = &g[k * p..(k + 1) * p];
            w_d += e;
            e_ln_r += e * ln_r[k];
            tied.add(e * r[k], gk, x, h[k], level);
            if level >= Level::Score {
                for a in 0..p {
                    e_g[a] += e * gk[a];
                }
            }
            if level == Level::Full {
                for a in 0..p {
                    for b in 0..p {
                        e_h[a * p + b] += e * h[k] * x[a] * x[b];
                    }
                }
            }
        }

        let d = match ties {
            Ties::Efron => tie_count,
            Ties::Breslow => 1,
        };
        let m = w_d / d as f64;
        out.pl += e_ln_r;
        for a in 0..p {
            out.score[a] += e_g[a];
            for b in 0..p {
                out.observed[(a, b)] -= e_h[a * p + b];
            }
        }
        let mut ebar = DVector::zeros(p);
        let mut z1 = vec![0.0; p];
        for step in 0..d {
            let c = step as f64 / d as f64;
            let z0 = sums.s0 - c * tied.s0;
            if !(z0 > 0.0) {
                return Err(Error::EmptyRiskSet(u));
            }
            out.pl -= m * z0.ln();
            if level == Level::Value {
                continue;
            }
            for a in 0..p {
                z1[a] = sums.s1[a] - c * tied.s1[a];
                out.score[a] -= m * z1[a] / z0;
                ebar[a] += z1[a] / z0 / d as f64;
            }
            if level == Level::Full {
                for a in 0..p {
                    for b in 0..p {
                        let z2 = sums.s2[a * p + b] - c * tied.s2[a * p + b];
                        let z2h = sums.s2h[a * p + b] - c * tied.s2h[a * p + b];
                        let outer = z1[a] * z1[b] / (z0 * z0);
                        out.expected[(a, b)] += m * (z2 / z0 - outer);
                        out.observed[(a, b)] += m * ((z2 + z2h) / z0 - outer);
                    }
                }
            }
        }
        if record {
            jumps.push(Jump {
                time: u,
                w_d,
                s0: sums.s0,
                s1: DVector::from_column_slice(&sums.s1),
                ebar,
                rows: event_rows.clone(),
            });
        }
    }
    if record {
        jumps.reverse();
        out.jumps.push(jumps);
        out.grad.push(g);
    }
    Ok(())
}
