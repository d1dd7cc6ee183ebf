use std::collections::{BTreeMap, BTreeSet};

use log::warn;

use super::{
    candidate_interval, AnalysisMode, ContactSet, InfectiousSets, LineList, LineListRecord,
    MissingPolicy, PairPolicy, PairRiskRow, PairTable, Term, TermSource,
};
use crate::error::{Error, Result};

enum Column {
    Person { infector: bool, index: usize },
    Pair(usize),
}

fn resolve(term: &Term, line_list: &LineList, contacts: &ContactSet) -> Result<Column> {
    let missing = || Error::InvalidParameter(format!("term `{term}` names an unknown column"));
    match term.source {
        TermSource::Infector | TermSource::Susceptible => Ok(Column::Person {
            infector: term.source == TermSource::Infector,
            index: line_list.covariate_index(&term.column).ok_or_else(missing)?,
        }),
        TermSource::Pair => contacts
            .pair_covariate_names()
            .iter()
            .position(|c| *c == term.column)
            .map(Column::Pair)
            .ok_or_else(missing),
    }
}

fn lookup(col: &Column, ri: &LineListRecord, rj: &LineListRecord, pair: &[Option<f64>]) -> Option<f64> {
    match *col {
        Column::Person { infector: true, index } => ri.covariates[index],
        Column::Person { infector: false, index } => rj.covariates[index],
        Column::Pair(index) => pair[index],
    }
}

/// Builds one row per ordered pair at risk of an observed infectious contact.
///
/// A pair `ij` is at risk on `(0, min(iota_i, t_j - t_i - eps_i, T_j - t_i - eps_i)]`
/// and excluded when that bound is not positive.
pub fn build_pair_rows(line_list: &LineList, contacts: &ContactSet, policy: &PairPolicy) -> Result<PairTable> {
    let columns = policy
        .terms
        .iter()
        .map(|t| resolve(t, line_list, contacts))
        .collect::<Result<Vec<_>>>()?;
    let stratum_col = policy
        .strata
        .as_ref()
        .map(|t| resolve(t, line_list, contacts))
        .transpose()?;

    let mut sets = InfectiousSets::compute(line_list, contacts);
    if let Some(&j) = sets.empty_ids().first() {
        return Err(Error::EmptyInfectiousSet(j));
    }
    if policy.mode == AnalysisMode::CompleteData {
        for (j, infectors) in sets.iter() {
            let rec = line_list.get(j).expect("set built from line list");
            match rec.infector {
                None => {
                    return Err(Error::InvalidData(format!(
                        "complete-data analysis needs the infector of {j}"
                    )))
                }
                Some(v) if infectors.binary_search(&v).is_err() => {
                    return Err(Error::InvalidData(format!(
                        "recorded infector {v} of {j} was not infectious at its infection time"
                    )))
                }
                Some(_) => {}
            }
        }
    }

    let mut rows = Vec::new();
    let mut incomplete = Vec::new();
    for (i, j, pair_cov) in contacts.iter() {
        let (Some(ri), Some(rj)) = (line_list.get(i), line_list.get(j)) else {
            continue;
        };
        if !ri.is_infected() {
            continue;
        }
        let Some(iota) = ri.infectious_period else { continue };
        let onset = ri.onset();
        let stop = iota.min(rj.t_infection - onset).min(rj.obs_limit - onset);
        if !(stop > 0.0) {
            continue;
        }
        let candidate = candidate_interval(ri, rj) == Some(stop) && sets.contains(j, i);
        let event = candidate
            && policy.mode == AnalysisMode::CompleteData
            && rj.infector == Some(i);

        let values: Vec<Option<f64>> = columns.iter().map(|c| lookup(c, ri, rj, pair_cov)).collect();
        let stratum = match &stratum_col {
            None => Some(0),
            Some(c) => match lookup(c, ri, rj, pair_cov) {
                Some(v) if v.is_finite() && v.fract() == 0.0 => Some(v as i64),
                Some(v) => {
                    return Err(Error::InvalidData(format!(
                        "stratum value {v} for pair ({i}, {j}) is not an integer"
                    )))
                }
                None => None,
            },
        };
        let complete = stratum.is_some() && values.iter().all(Option::is_some);
        if !complete {
            incomplete.push(rows.len());
        }
        rows.push(PairRiskRow {
            infector: i,
            susceptible: j,
            start: 0.0,
            stop,
            event,
            candidate,
            covariates: values.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
            stratum: stratum.unwrap_or(0),
            weight: 1.0,
        });
    }

    if !incomplete.is_empty() {
        let mut drop = vec![false; rows.len()];
        for &k in &incomplete {
            drop[k] = true;
        }
        match policy.missing {
            MissingPolicy::CompleteCase => {
                let tainted: BTreeSet<u64> = incomplete
                    .iter()
                    .filter(|&&k| rows[k].candidate)
                    .map(|&k| rows[k].susceptible)
                    .collect();
                for (k, row) in rows.iter().enumerate() {
                    if tainted.contains(&row.susceptible) {
                        drop[k] = true;
                    }
                }
                for j in &tainted {
                    sets.remove(*j);
                }
            }
            MissingPolicy::DropPairOnly => {
                warn!(
                    "dropping {} pairs with missing covariates; remaining possible infectors get extra credit",
                    incomplete.len()
                );
                let removed: BTreeSet<(u64, u64)> = incomplete
                    .iter()
                    .filter(|&&k| rows[k].candidate)
                    .map(|&k| (rows[k].infector, rows[k].susceptible))
                    .collect();
                sets.retain(|i, j| !removed.contains(&(i, j)));
                if policy.mode == AnalysisMode::CompleteData {
                    let lost: BTreeSet<u64> = incomplete
                        .iter()
                        .filter(|&&k| rows[k].event)
                        .map(|&k| rows[k].susceptible)
                        .collect();
                    for j in lost {
                        sets.remove(j);
                    }
                }
            }
        }
        let mut k = 0;
        rows.retain(|_| {
            let keep = !drop[k];
            k += 1;
            keep
        });
        // Candidate flags must agree with the surviving sets.
        for row in rows.iter_mut() {
            if row.candidate && !sets.contains(row.susceptible, row.infector) {
                row.candidate = false;
                row.event = false;
            }
        }
    }

    Ok(PairTable {
        covariate_names: policy.terms.iter().map(Term::to_string).collect(),
        rows,
        infectious_sets: sets,
        mode: policy.mode,
    })
}

/// Splits a row at interior break points for piecewise-constant covariates.
/// `covariates` holds one vector per resulting segment; only the last
/// segment keeps the event and candidate flags.
pub fn split_row(row: &PairRiskRow, breaks: &[f64], covariates: &[Vec<f64>]) -> Result<Vec<PairRiskRow>> {
    if covariates.len() != breaks.len() + 1 {
        return Err(Error::InvalidParameter(format!(
            "{} break points need {} covariate vectors, got {}",
            breaks.len(),
            breaks.len() + 1,
            covariates.len()
        )));
    }
    let mut edges = Vec::with_capacity(breaks.len() + 2);
    edges.push(row.start);
    for &b in breaks {
        if !(b > *edges.last().unwrap() && b < row.stop) {
            return Err(Error::InvalidParameter(format!(
                "break point {b} outside ({}, {}) or not increasing",
                row.start, row.stop
            )));
        }
        edges.push(b);
    }
    edges.push(row.stop);
    let last = covariates.len() - 1;
    Ok(covariates
        .iter()
        .enumerate()
        .map(|(k, x)| PairRiskRow {
            start: edges[k],
            stop: edges[k + 1],
            event: row.event && k == last,
            candidate: row.candidate && k == last,
            covariates: x.clone(),
            ..row.clone()
        })
        .collect())
}

/// Mean number of infectors to which the susceptible of a randomly chosen
/// at-risk pair is exposed: `(1/m) sum_j Y_.j(0+)^2`.
pub fn exposure_diagnostic(rows: &[PairRiskRow]) -> Result<f64> {
    let pairs: BTreeSet<(u64, u64)> = rows
        .iter()
        .filter(|r| r.start == 0.0 && r.stop > 0.0)
        .map(|r| (r.susceptible, r.infector))
        .collect();
    let m = pairs.len();
    if m == 0 {
        return Err(Error::NoPairsAtRisk);
    }
    let mut per_susceptible: BTreeMap<u64, usize> = BTreeMap::new();
    for (j, _) in &pairs {
        *per_susceptible.entry(*j).or_insert(0) += 1;
    }
    let sum_sq: f64 = per_susceptible.values().map(|&c| (c * c) as f64).sum();
    Ok(sum_sq / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LineListRecord;

    fn person(id: u64, t: f64, iota: Option<f64>, obs: f64, covs: Vec<Option<f64>>) -> LineListRecord {
        LineListRecord {
            id,
            group: Some("g".into()),
            t_infection: t,
            latent: 0.0,
            infectious_period: iota,
            obs_limit: obs,
            imported: false,
            infector: None,
            covariates: covs,
        }
    }

    #[test]
    fn censoring_by_observation_limit() {
        let mut i = person(1, 0.0, Some(6.0), 4.0, vec![]);
        i.imported = true;
        let j = person(2, f64::INFINITY, None, 4.0, vec![]);
        let ll = LineList::new(vec![], vec![i, j]).unwrap();
        let contacts = ContactSet::from_groups(&ll);
        let table = build_pair_rows(&ll, &contacts, &PairPolicy::default()).unwrap();
        assert_eq!(table.rows.len(), 1);
        let r = &table.rows[0];
        assert_eq!((r.infector, r.susceptible, r.start, r.stop, r.event), (1, 2, 0.0, 4.0, false));
    }

    #[test]
    fn observed_transmission_gives_event_row() {
        let mut i = person(1, 0.0, Some(6.0), 20.0, vec![]);
        i.imported = true;
        let mut j = person(2, 3.0, Some(1.0), 20.0, vec![]);
        j.infector = Some(1);
        let ll = LineList::new(vec![], vec![i, j]).unwrap();
        let contacts = ContactSet::from_groups(&ll);
        let table = build_pair_rows(&ll, &contacts, &PairPolicy::default()).unwrap();
        // row 2 -> 1 excluded: 1 infected before 2 became infectious
        assert_eq!(table.rows.len(), 1);
        let r = &table.rows[0];
        assert_eq!((r.stop, r.event, r.candidate), (3.0, true, true));
        assert_eq!(table.infectious_sets.get(2), Some(&[1u64][..]));
    }

    #[test]
    fn complete_data_requires_infector() {
        let mut i = person(1, 0.0, Some(6.0), 20.0, vec![]);
        i.imported = true;
        let j = person(2, 3.0, Some(1.0), 20.0, vec![]);
        let ll = LineList::new(vec![], vec![i, j]).unwrap();
        let contacts = ContactSet::from_groups(&ll);
        assert!(build_pair_rows(&ll, &contacts, &PairPolicy::default()).is_err());
        let policy = PairPolicy {
            mode: AnalysisMode::UnknownInfector,
            ..Default::default()
        };
        let table = build_pair_rows(&ll, &contacts, &policy).unwrap();
        assert!(table.rows[0].candidate && !table.rows[0].event);
    }

    #[test]
    fn empty_infectious_set_is_an_error() {
        let i = person(1, 0.0, Some(6.0), 20.0, vec![]);
        let ll = LineList::new(vec![], vec![i]).unwrap();
        let contacts = ContactSet::from_groups(&ll);
        assert!(matches!(
            build_pair_rows(&ll, &contacts, &PairPolicy::default()),
            Err(Error::EmptyInfectiousSet(1))
        ));
    }

    fn missing_household() -> (LineList, ContactSet) {
        // 1 and 2 both infectious when 3 is infected; 2's covariate missing.
        let names = vec!["inf_x".to_string()];
        let mut a = person(1, 0.0, Some(6.0), 20.0, vec![Some(1.0)]);
        a.imported = true;
        let mut b = person(2, 0.0, Some(6.0), 20.0, vec![None]);
        b.imported = true;
        let c = person(3, 2.0, Some(6.0), 20.0, vec![Some(0.0)]);
        let d = person(4, f64::INFINITY, None, 20.0, vec![Some(0.0)]);
        let ll = LineList::new(names, vec![a, b, c, d]).unwrap();
        let contacts = ContactSet::from_groups(&ll);
        (ll, contacts)
    }

    #[test]
    fn complete_case_drops_every_row_of_tainted_susceptible() {
        let (ll, contacts) = missing_household();
        let policy = PairPolicy {
            mode: AnalysisMode::UnknownInfector,
            terms: vec!["inf:inf_x".parse().unwrap()],
            ..Default::default()
        };
        let table = build_pair_rows(&ll, &contacts, &policy).unwrap();
        assert!(table.rows.iter().all(|r| r.susceptible != 3));
        assert!(table.rows.iter().all(|r| r.covariates.iter().all(|v| v.is_finite())));
        assert!(table.infectious_sets.get(3).is_none());
        // 1 -> 4, 3 -> 4 survive; 2 -> 4 dropped
        let pairs: Vec<(u64, u64)> = table.rows.iter().map(|r| (r.infector, r.susceptible)).collect();
        assert!(pairs.contains(&(1, 4)) && pairs.contains(&(3, 4)) && !pairs.contains(&(2, 4)));
    }

    #[test]
    fn drop_pair_only_keeps_other_candidates() {
        let (ll, contacts) = missing_household();
        let policy = PairPolicy {
            mode: AnalysisMode::UnknownInfector,
            missing: MissingPolicy::DropPairOnly,
            terms: vec!["inf:inf_x".parse().unwrap()],
            ..Default::default()
        };
        let table = build_pair_rows(&ll, &contacts, &policy).unwrap();
        assert_eq!(table.infectious_sets.get(3), Some(&[1u64][..]));
        assert!(table.rows.iter().any(|r| r.susceptible == 3 && r.infector == 1 && r.candidate));
    }

    #[test]
    fn exposure_diagnostic_values() {
        let row = |i: u64, j: u64| PairRiskRow {
            infector: i,
            susceptible: j,
            start: 0.0,
            stop: 1.0,
            event: false,
            candidate: false,
            covariates: vec![],
            stratum: 0,
            weight: 1.0,
        };
        assert_eq!(exposure_diagnostic(&[row(1, 9)]).unwrap(), 1.0);
        let four: Vec<_> = (1..=4).map(|i| row(i, 9)).collect();
        assert_eq!(exposure_diagnostic(&four).unwrap(), 4.0);
        assert!(exposure_diagnostic(&[]).is_err());
    }

    #[test]
    fn split_rows_keep_flags_on_last_segment() {
        let row = PairRiskRow {
            infector: 1,
            susceptible: 2,
            start: 0.0,
            stop: 5.0,
            event: true,
            candidate: true,
            covariates: vec![0.0],
            stratum: 0,
            weight: 1.0,
        };
        let parts = split_row(&row, &[2.0], &[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!((parts[0].start, parts[0].stop, parts[0].event), (0.0, 2.0, false));
        assert_eq!((parts[1].start, parts[1].stop, parts[1].event), (2.0, 5.0, true));
        assert!(split_row(&row, &[6.0], &[vec![0.0], vec![1.0]]).is_err());
    }
}
