//! Independent reference computations written from the definitions, with
//! no shared code paths beyond the row type.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cireg_core::{PairRiskRow, RelRisk};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

fn eta(x: &[f64], beta: &[f64]) -> f64 {
    x.iter().zip(beta).map(|(a, b)| a * b).sum()
}

fn rr(spec: RelRisk, e: f64) -> f64 {
    match spec {
        RelRisk::Loglinear => e.exp(),
        RelRisk::Linear => 1.0 + e,
    }
}

/// `d ln r / d beta` for one row.
fn dlog(spec: RelRisk, x: &[f64], beta: &[f64]) -> Vec<f64> {
    let f = match spec {
        RelRisk::Loglinear => 1.0,
        RelRisk::Linear => 1.0 / (1.0 + eta(x, beta)),
    };
    x.iter().map(|v| v * f).collect()
}

fn at_risk(r: &PairRiskRow, u: f64) -> bool {
    r.start < u && u <= r.stop
}

/// Distinct event times per stratum.
fn event_times(rows: &[PairRiskRow], is_event: &dyn Fn(&PairRiskRow) -> bool) -> BTreeMap<i64, Vec<f64>> {
    let mut out: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| is_event(r)) {
        out.entry(r.stratum).or_default().push(r.stop);
    }
    for v in out.values_mut() {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    out
}

/// Log partial likelihood by direct sums over the risk set at each event.
/// `efron` subtracts `k/d` of the tied events' risk for the k-th event.
pub fn naive_pl(rows: &[PairRiskRow], beta: &[f64], spec: RelRisk, efron: bool) -> f64 {
    let mut total = 0.0;
    for (stratum, times) in event_times(rows, &|r| r.event) {
        for u in times {
            let in_stratum = rows.iter().filter(|r| r.stratum == stratum);
            let y: f64 = in_stratum
                .clone()
                .filter(|r| at_risk(r, u))
                .map(|r| rr(spec, eta(&r.covariates, beta)))
                .sum();
            let tied: Vec<&PairRiskRow> = in_stratum.filter(|r| r.event && r.stop == u).collect();
            let d = tied.len();
            let tied_risk: f64 = tied.iter().map(|r| rr(spec, eta(&r.covariates, beta))).sum();
            for (k, r) in tied.iter().enumerate() {
                total += rr(spec, eta(&r.covariates, beta)).ln();
                let denom = if efron { y - k as f64 / d as f64 * tied_risk } else { y };
                total -= denom.ln();
            }
        }
    }
    total
}

/// Score `sum_events (g - E)` with the Breslow denominator (no ties).
pub fn naive_score(rows: &[PairRiskRow], beta: &[f64], spec: RelRisk) -> Vec<f64> {
    let p = beta.len();
    let mut u = vec![0.0; p];
    for ev in rows.iter().filter(|r| r.event) {
        let t = ev.stop;
        let (mut s0, mut s1) = (0.0, vec![0.0; p]);
        for r in rows.iter().filter(|r| r.stratum == ev.stratum && at_risk(r, t)) {
            let w = rr(spec, eta(&r.covariates, beta));
            s0 += w;
            for (a, g) in dlog(spec, &r.covariates, beta).into_iter().enumerate() {
                s1[a] += w * g;
            }
        }
        let g = dlog(spec, &ev.covariates, beta);
        for a in 0..p {
            u[a] += g[a] - s1[a] / s0;
        }
    }
    u
}

/// Observed information for the loglinear family without ties:
/// `sum_events V(beta, u)`.
pub fn naive_loglinear_information(rows: &[PairRiskRow], beta: &[f64]) -> Vec<Vec<f64>> {
    let p = beta.len();
    let mut info = vec![vec![0.0; p]; p];
    for ev in rows.iter().filter(|r| r.event) {
        let t = ev.stop;
        let (mut s0, mut s1, mut s2) = (0.0, vec![0.0; p], vec![vec![0.0; p]; p]);
        for r in rows.iter().filter(|r| r.stratum == ev.stratum && at_risk(r, t)) {
            let w = eta(&r.covariates, beta).exp();
            s0 += w;
            for a in 0..p {
                s1[a] += w * r.covariates[a];
                for b in 0..p {
                    s2[a][b] += w * r.covariates[a] * r.covariates[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..p {
                info[a][b] += s2[a][b] / s0 - s1[a] * s1[b] / (s0 * s0);
            }
        }
    }
    info
}

/// Breslow jumps `(u, dN(u) / Y(beta, u))` per stratum, increasing in `u`.
pub fn naive_breslow(rows: &[PairRiskRow], beta: &[f64], spec: RelRisk) -> BTreeMap<i64, Vec<(f64, f64)>> {
    let mut out = BTreeMap::new();
    for (stratum, times) in event_times(rows, &|r| r.event) {
        let jumps = times
            .into_iter()
            .map(|u| {
                let in_stratum = rows.iter().filter(|r| r.stratum == stratum);
                let d = in_stratum.clone().filter(|r| r.event && r.stop == u).count() as f64;
                let y: f64 = in_stratum
                    .filter(|r| at_risk(r, u))
                    .map(|r| rr(spec, eta(&r.covariates, beta)))
                    .sum();
                (u, d / y)
            })
            .collect();
        out.insert(stratum, jumps);
    }
    out
}

/// Nelson-Aalen `(u, Lambda(u))` with integer risk-set counts.
pub fn nelson_aalen(rows: &[PairRiskRow]) -> BTreeMap<i64, Vec<(f64, f64)>> {
    let mut out = BTreeMap::new();
    for (stratum, times) in event_times(rows, &|r| r.event) {
        let mut cum = 0.0;
        let steps = times
            .into_iter()
            .map(|u| {
                let in_stratum = rows.iter().filter(|r| r.stratum == stratum);
                let d = in_stratum.clone().filter(|r| r.event && r.stop == u).count();
                let y = in_stratum.filter(|r| at_risk(r, u)).count();
                cum += d as f64 / y as f64;
                (u, cum)
            })
            .collect();
        out.insert(stratum, steps);
    }
    out
}

/// Step-function value of increasing `(time, cumulative)` pairs.
pub fn step_value(steps: &[(f64, f64)], tau: f64) -> f64 {
    steps.iter().take_while(|s| s.0 <= tau).last().map_or(0.0, |s| s.1)
}

/// Random pair rows: `n` rows, `p` covariates, `events` of them events.
/// `ties` rounds times to integers; `truncate` gives some rows a positive
/// start; `strata` labels rows with that many strata.
pub struct InstanceSpec {
    pub n: usize,
    pub p: usize,
    pub ties: bool,
    pub truncate: bool,
    pub strata: i64,
    /// Covariates in [0, 1] (safe for the linear family) instead of normal-ish.
    pub unit_covariates: bool,
}

pub fn random_rows(rng: &mut ChaCha8Rng, spec: &InstanceSpec) -> Vec<PairRiskRow> {
    loop {
        let rows: Vec<PairRiskRow> = (0..spec.n)
            .map(|k| {
                let stop = if spec.ties {
                    rng.random_range(1..=6) as f64
                } else {
                    rng.random_range(0.05..6.0)
                };
                let start = if spec.truncate && rng.random_bool(0.3) {
                    stop * rng.random_range(0.0..0.9)
                } else {
                    0.0
                };
                let start = if spec.ties { start.floor() } else { start };
                let covariates = (0..spec.p)
                    .map(|_| {
                        if spec.unit_covariates {
                            rng.random_range(0.0..1.0)
                        } else {
                            rng.random_range(-1.5..1.5)
                        }
                    })
                    .collect();
                PairRiskRow {
                    infector: k as u64 % 7,
                    susceptible: 100 + k as u64,
                    start,
                    stop,
                    event: rng.random_bool(0.5),
                    candidate: false,
                    covariates,
                    stratum: rng.random_range(0..spec.strata.max(1)),
                    weight: 1.0,
                }
            })
            .collect();
        if rows.iter().any(|r| r.event) {
            return rows;
        }
    }
}

/// Random unknown-infector instance: infectees with 1 to 4 candidate rows
/// each plus censored rows, continuous times, tree count at most `max_trees`.
pub struct EmInstance {
    pub rows: Vec<PairRiskRow>,
    pub sets: BTreeMap<u64, Vec<u64>>,
    pub probs: BTreeMap<u64, Vec<(u64, f64)>>,
}

pub fn random_em_instance(rng: &mut ChaCha8Rng, p: usize, max_trees: u128) -> EmInstance {
    let mut rows = Vec::new();
    let mut sets = BTreeMap::new();
    let mut probs = BTreeMap::new();
    let infectees = rng.random_range(2..=7);
    let mut trees: u128 = 1;
    let cov = |rng: &mut ChaCha8Rng| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    for j in 0..infectees {
        let j = 1000 + j as u64;
        let mut size = rng.random_range(1..=4usize);
        while trees * size as u128 > max_trees {
            size -= 1;
        }
        trees *= size as u128;
        let infectors: Vec<u64> = (0..size as u64).map(|k| k * 10 + j % 10).collect();
        let raw: Vec<f64> = (0..size).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        probs.insert(j, infectors.iter().zip(&raw).map(|(&i, w)| (i, w / total)).collect());
        for &i in &infectors {
            rows.push(PairRiskRow {
                infector: i,
                susceptible: j,
                start: 0.0,
                stop: rng.random_range(0.05..5.0),
                event: false,
                candidate: true,
                covariates: cov(rng),
                stratum: 0,
                weight: 1.0,
            });
        }
        sets.insert(j, infectors);
    }
    for k in 0..rng.random_range(3..15) {
        rows.push(PairRiskRow {
            infector: 500 + k,
            susceptible: 2000 + k,
            start: 0.0,
            stop: rng.random_range(0.05..6.0),
            event: false,
            candidate: false,
            covariates: cov(rng),
            stratum: 0,
            weight: 1.0,
        });
    }
    EmInstance { rows, sets, probs }
}

/// Every tree as `(infector per infectee, probability)`, by recursion.
pub fn all_trees(probs: &BTreeMap<u64, Vec<(u64, f64)>>) -> Vec<(BTreeMap<u64, u64>, f64)> {
    let mut out = vec![(BTreeMap::new(), 1.0)];
    for (&j, options) in probs {
        let mut next = Vec::new();
        for (tree, pr) in &out {
            for &(i, p) in options {
                let mut t = tree.clone();
                t.insert(j, i);
                next.push((t, pr * p));
            }
        }
        out = next;
    }
    out
}

/// Rows of the complete-data problem implied by tree `v`.
pub fn rows_for_tree(rows: &[PairRiskRow], tree: &BTreeMap<u64, u64>) -> Vec<PairRiskRow> {
    rows.iter()
        .map(|r| PairRiskRow {
            event: r.candidate && tree.get(&r.susceptible) == Some(&r.infector),
            ..r.clone()
        })
        .collect()
}

/// `d Lambda_hat / d beta` at `tau` for loglinear complete data without
/// ties: `-sum_{u <= tau} S1 / S0^2`.
pub fn naive_breslow_gradient(rows: &[PairRiskRow], beta: &[f64], tau: f64) -> Vec<f64> {
    let p = beta.len();
    let mut grad = vec![0.0; p];
    for ev in rows.iter().filter(|r| r.event && r.stop <= tau) {
        let (mut s0, mut s1) = (0.0, vec![0.0; p]);
        for r in rows.iter().filter(|r| at_risk(r, ev.stop)) {
            let w = eta(&r.covariates, beta).exp();
            s0 += w;
            for a in 0..p {
                s1[a] += w * r.covariates[a];
            }
        }
        for a in 0..p {
            grad[a] -= s1[a] / (s0 * s0);
        }
    }
    grad
}

/// `sum_{u <= tau} dN / Y^2` for loglinear complete data without ties.
pub fn naive_breslow_square_sum(rows: &[PairRiskRow], beta: &[f64], tau: f64) -> f64 {
    rows.iter()
        .filter(|r| r.event && r.stop <= tau)
        .map(|ev| {
            let y: f64 = rows
                .iter()
                .filter(|r| at_risk(r, ev.stop))
                .map(|r| eta(&r.covariates, beta).exp())
                .sum();
            1.0 / (y * y)
        })
        .sum()
}

/// Inverse of a small symmetric matrix by Gauss-Jordan elimination.
pub fn invert(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                let src = a[col].clone();
                for (v, s) in a[r].iter_mut().zip(src) {
                    *v -= f * s;
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn quad_form(v: &[f64], m: &[Vec<f64>]) -> f64 {
    let n = v.len();
    (0..n).map(|a| (0..n).map(|b| v[a] * m[a][b] * v[b]).sum::<f64>()).sum()
}
