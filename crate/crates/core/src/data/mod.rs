//! Line lists, contact sets, and pairwise risk rows in infectiousness age.

mod io;
mod pairs;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use io::{
    load_line_list, read_line_list, read_pair_rows, read_pairs, write_line_list, write_pair_rows,
    write_pairs,
};
pub use pairs::{build_pair_rows, exposure_diagnostic, split_row};

/// One individual's event times and covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct LineListRecord {
    pub id: u64,
    /// Close-contact group (household); contacts are generated within groups
    /// when no explicit pair file is given.
    pub group: Option<String>,
    /// Absolute infection time, `+inf` if never infected.
    pub t_infection: f64,
    pub latent: f64,
    pub infectious_period: Option<f64>,
    /// Infection in this individual is observable up to this absolute time.
    pub obs_limit: f64,
    pub imported: bool,
    /// Observed infector, when who-infects-whom is known.
    pub infector: Option<u64>,
    pub covariates: Vec<Option<f64>>,
}

impl LineListRecord {
    /// A record for someone never infected during observation.
    pub fn susceptible(id: u64, obs_limit: f64, covariates: Vec<Option<f64>>) -> Self {
        LineListRecord {
            id,
            group: None,
            t_infection: f64::INFINITY,
            latent: 0.0,
            infectious_period: None,
            obs_limit,
            imported: false,
            infector: None,
            covariates,
        }
    }

    /// Fixed-offset natural history from a symptom onset date: infection
    /// `incubation` days before onset, then `latent` days before becoming
    /// infectious for `infectious` days.
    pub fn from_symptom_onset(
        id: u64,
        t_symptoms: f64,
        incubation: f64,
        latent: f64,
        infectious: f64,
        obs_limit: f64,
    ) -> Self {
        LineListRecord {
            id,
            group: None,
            t_infection: t_symptoms - incubation,
            latent,
            infectious_period: Some(infectious),
            obs_limit,
            imported: false,
            infector: None,
            covariates: Vec::new(),
        }
    }

    pub fn is_infected(&self) -> bool {
        self.t_infection.is_finite()
    }

    /// Infected at or before the observation limit.
    pub fn infection_observed(&self) -> bool {
        self.is_infected() && self.t_infection <= self.obs_limit
    }

    /// Absolute time of onset of infectiousness.
    pub fn onset(&self) -> f64 {
        self.t_infection + self.latent
    }

    pub fn removal(&self) -> f64 {
        self.onset() + self.infectious_period.unwrap_or(0.0)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.t_infection.is_nan() || self.t_infection == f64::NEG_INFINITY {
            return Err("t_infection must be finite or +inf".into());
        }
        if self.obs_limit.is_nan() {
            return Err("obs_limit must be a number".into());
        }
        if !(self.latent >= 0.0 && self.latent.is_finite()) {
            return Err(format!("latent period {} must be finite and >= 0", self.latent));
        }
        if self.is_infected() {
            match self.infectious_period {
                Some(d) if d > 0.0 && d.is_finite() => {}
                Some(d) => return Err(format!("infectious period {d} must be > 0")),
                None => return Err("infected individual without an infectious period".into()),
            }
        } else if self.imported {
            return Err("imported infection without a finite infection time".into());
        }
        if let Some(d) = self.infectious_period {
            if !(d > 0.0) {
                return Err(format!("infectious period {d} must be > 0"));
            }
        }
        if self.infector == Some(self.id) {
            return Err("individual listed as its own infector".into());
        }
        Ok(())
    }
}

/// Individuals plus the names of their covariate columns.
#[derive(Debug, Clone, Default)]
pub struct LineList {
    pub covariate_names: Vec<String>,
    pub records: Vec<LineListRecord>,
    index: HashMap<u64, usize>,
}

impl LineList {
    pub fn new(covariate_names: Vec<String>, records: Vec<LineListRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (pos, rec) in records.iter().enumerate() {
            rec.validate()
                .map_err(|m| Error::InvalidData(format!("record {}: {m}", rec.id)))?;
            if rec.covariates.len() != covariate_names.len() {
                return Err(Error::InvalidData(format!(
                    "record {} has {} covariates, expected {}",
                    rec.id,
                    rec.covariates.len(),
                    covariate_names.len()
                )));
            }
            if index.insert(rec.id, pos).is_some() {
                return Err(Error::InvalidData(format!("duplicate id {}", rec.id)));
            }
        }
        Ok(LineList {
            covariate_names,
            records,
            index,
        })
    }

    pub fn get(&self, id: u64) -> Option<&LineListRecord> {
        self.index.get(&id).map(|&k| &self.records[k])
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Flags every non-imported infectee with an empty infectious set as
    /// imported and returns their ids.
    pub fn mark_unexplained_as_imported(&mut self, contacts: &ContactSet) -> Vec<u64> {
        let sets = InfectiousSets::compute(self, contacts);
        let ids = sets.empty_ids();
        for &id in &ids {
            let k = self.index[&id];
            self.records[k].imported = true;
        }
        ids
    }
}

/// Ordered pairs `(i, j)` along which infectious contact is possible,
/// with optional pair-level covariates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContactSet {
    pair_covariate_names: Vec<String>,
    edges: BTreeMap<(u64, u64), Vec<Option<f64>>>,
}

impl ContactSet {
    pub fn new(pair_covariate_names: Vec<String>) -> Self {
        ContactSet {
            pair_covariate_names,
            edges: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, i: u64, j: u64, covariates: Vec<Option<f64>>) -> Result<()> {
        if i == j {
            return Err(Error::InvalidData(format!("self-pair ({i}, {i}) in contact set")));
        }
        if covariates.len() != self.pair_covariate_names.len() {
            return Err(Error::InvalidData(format!(
                "pair ({i}, {j}) has {} covariates, expected {}",
                covariates.len(),
                self.pair_covariate_names.len()
            )));
        }
        if self.edges.insert((i, j), covariates).is_some() {
            return Err(Error::InvalidData(format!("duplicate pair ({i}, {j})")));
        }
        Ok(())
    }

    /// All ordered within-group pairs.
    pub fn from_groups(line_list: &LineList) -> Self {
        let mut groups: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for rec in &line_list.records {
            if let Some(g) = rec.group.as_deref() {
                groups.entry(g).or_default().push(rec.id);
            }
        }
        let mut set = ContactSet::new(Vec::new());
        for members in groups.values() {
            for &i in members {
                for &j in members {
                    if i != j {
                        set.edges.insert((i, j), Vec::new());
                    }
                }
            }
        }
        set
    }

    pub fn pair_covariate_names(&self) -> &[String] {
        &self.pair_covariate_names
    }

    pub fn contains(&self, i: u64, j: u64) -> bool {
        self.edges.contains_key(&(i, j))
    }

    pub fn covariates(&self, i: u64, j: u64) -> Option<&[Option<f64>]> {
        self.edges.get(&(i, j)).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, u64, &[Option<f64>])> + '_ {
        self.edges.iter().map(|(&(i, j), c)| (i, j, c.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Contact interval `t_j - t_i - eps_i` when `i` was infectious at `t_j`,
/// i.e. when `i` belongs to the infectious set of `j` (contact permitting).
pub(crate) fn candidate_interval(infector: &LineListRecord, infectee: &LineListRecord) -> Option<f64> {
    if !infector.is_infected() || !infectee.infection_observed() || infectee.imported {
        return None;
    }
    let tau = infectee.t_infection - infector.onset();
    let iota = infector.infectious_period?;
    (tau > 0.0 && tau <= iota).then_some(tau)
}

/// Possible infectors of every observed, non-imported infectee.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InfectiousSets {
    sets: BTreeMap<u64, Vec<u64>>,
}

impl InfectiousSets {
    pub fn compute(line_list: &LineList, contacts: &ContactSet) -> Self {
        let mut sets: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for rec in &line_list.records {
            if rec.infection_observed() && !rec.imported {
                sets.insert(rec.id, Vec::new());
            }
        }
        for (i, j, _) in contacts.iter() {
            let Some(list) = sets.get_mut(&j) else { continue };
            let (Some(ri), Some(rj)) = (line_list.get(i), line_list.get(j)) else {
                continue;
            };
            if candidate_interval(ri, rj).is_some() {
                list.push(i);
            }
        }
        for list in sets.values_mut() {
            list.sort_unstable();
        }
        InfectiousSets { sets }
    }

    pub fn from_map(sets: BTreeMap<u64, Vec<u64>>) -> Self {
        InfectiousSets { sets }
    }

    pub fn get(&self, infectee: u64) -> Option<&[u64]> {
        self.sets.get(&infectee).map(Vec::as_slice)
    }

    pub fn contains(&self, infectee: u64, infector: u64) -> bool {
        self.sets
            .get(&infectee)
            .is_some_and(|s| s.binary_search(&infector).is_ok())
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[u64])> + '_ {
        self.sets.iter().map(|(&j, s)| (j, s.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn empty_ids(&self) -> Vec<u64> {
        self.sets
            .iter()
            .filter(|(_, s)| s.is_empty())
            .map(|(&j, _)| j)
            .collect()
    }

    /// Number of candidate (infector, infectee) pairs.
    pub fn total_candidates(&self) -> usize {
        self.sets.values().map(Vec::len).sum()
    }

    /// `|V|`, the number of transmission trees consistent with the data,
    /// saturating at `u128::MAX`.
    pub fn tree_count(&self) -> u128 {
        self.sets
            .values()
            .filter(|s| !s.is_empty())
            .fold(1u128, |acc, s| acc.saturating_mul(s.len() as u128))
    }

    /// Map from infectious-set size to number of infectees with that size.
    pub fn size_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for s in self.sets.values() {
            *hist.entry(s.len()).or_insert(0) += 1;
        }
        hist
    }

    pub(crate) fn retain(&mut self, mut keep: impl FnMut(u64, u64) -> bool) {
        for (&j, list) in self.sets.iter_mut() {
            list.retain(|&i| keep(i, j));
        }
        self.sets.retain(|_, list| !list.is_empty());
    }

    pub(crate) fn remove(&mut self, infectee: u64) {
        self.sets.remove(&infectee);
    }
}

/// Where a model term takes its value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TermSource {
    /// Covariate of the infectious partner `i`.
    Infector,
    /// Covariate of the susceptible partner `j`.
    Susceptible,
    /// Covariate of the ordered pair `ij`.
    Pair,
}

/// A named column of the pairwise design, e.g. `inf:age` or `pair:x`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Term {
    pub source: TermSource,
    pub column: String,
}

impl Term {
    pub fn new(source: TermSource, column: impl Into<String>) -> Self {
        Term {
            source,
            column: column.into(),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.source {
            TermSource::Infector => "inf",
            TermSource::Susceptible => "sus",
            TermSource::Pair => "pair",
        };
        write!(f, "{prefix}:{}", self.column)
    }
}

impl FromStr for Term {
    type Err = Error;

    /// `inf:col`, `sus:col`, or `pair:col`; a bare column name means the
    /// infector's value.
    fn from_str(s: &str) -> Result<Self> {
        let (source, column) = match s.split_once(':') {
            Some(("inf", c)) => (TermSource::Infector, c),
            Some(("sus", c)) => (TermSource::Susceptible, c),
            Some(("pair", c)) => (TermSource::Pair, c),
            Some((other, _)) => {
                return Err(Error::InvalidParameter(format!(
                    "unknown term source `{other}` (expected inf, sus, or pair)"
                )))
            }
            None => (TermSource::Infector, s),
        };
        if column.is_empty() {
            return Err(Error::InvalidParameter(format!("empty column name in term `{s}`")));
        }
        Ok(Term::new(source, column))
    }
}

/// Terms used when none are given: line-list columns prefixed `inf_` or
/// `sus_` by role, then every pair covariate.
pub fn default_terms(line_list: &LineList, contacts: &ContactSet) -> Vec<Term> {
    let mut terms = Vec::new();
    for name in &line_list.covariate_names {
        if name.starts_with("inf_") {
            terms.push(Term::new(TermSource::Infector, name.clone()));
        } else if name.starts_with("sus_") {
            terms.push(Term::new(TermSource::Susceptible, name.clone()));
        }
    }
    for name in contacts.pair_covariate_names() {
        terms.push(Term::new(TermSource::Pair, name.clone()));
    }
    terms
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnalysisMode {
    /// Who-infects-whom observed through the `infector` column.
    #[default]
    CompleteData,
    /// Only infection times observed; candidate rows carry the possible
    /// infectors of each infectee.
    UnknownInfector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    /// Drop every row of susceptible `j` when any possible infector of `j`
    /// has a missing covariate.
    #[default]
    CompleteCase,
    /// Drop only the affected pairs. Gives the remaining possible infectors
    /// too much credit for the infection.
    DropPairOnly,
}

#[derive(Debug, Clone, Default)]
pub struct PairPolicy {
    pub mode: AnalysisMode,
    pub missing: MissingPolicy,
    pub terms: Vec<Term>,
    pub strata: Option<Term>,
}

/// One ordered pair's at-risk interval `(start, stop]` in infectiousness age.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRiskRow {
    pub infector: u64,
    pub susceptible: u64,
    pub start: f64,
    pub stop: f64,
    /// Observed infectious contact at `stop`.
    pub event: bool,
    /// `infector` is a possible infector of `susceptible` and this row ends
    /// at the contact interval.
    pub candidate: bool,
    pub covariates: Vec<f64>,
    pub stratum: i64,
    pub weight: f64,
}

/// Pair rows plus the infectious sets they were built against.
#[derive(Debug, Clone)]
pub struct PairTable {
    pub covariate_names: Vec<String>,
    pub rows: Vec<PairRiskRow>,
    pub infectious_sets: InfectiousSets,
    pub mode: AnalysisMode,
}

impl PairTable {
    /// Rebuilds a table from exported rows, recovering infectious sets from
    /// the candidate flags.
    pub fn from_rows(covariate_names: Vec<String>, rows: Vec<PairRiskRow>, mode: AnalysisMode) -> Result<Self> {
        let mut sets: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for row in &rows {
            if row.covariates.len() != covariate_names.len() {
                return Err(Error::InvalidData(format!(
                    "row ({}, {}) has {} covariates, expected {}",
                    row.infector,
                    row.susceptible,
                    row.covariates.len(),
                    covariate_names.len()
                )));
            }
            if row.candidate {
                let list = sets.entry(row.susceptible).or_default();
                if !list.contains(&row.infector) {
                    list.push(row.infector);
                }
            }
        }
        for list in sets.values_mut() {
            list.sort_unstable();
        }
        Ok(PairTable {
            covariate_names,
            rows,
            infectious_sets: InfectiousSets::from_map(sets),
            mode,
        })
    }

    /// Largest infectiousness age at which any pair is at risk.
    pub fn max_stop(&self) -> f64 {
        self.rows.iter().map(|r| r.stop).fold(0.0, f64::max)
    }

    /// Empirical quantiles of the row end points, i.e. of all possible
    /// (censored and uncensored) contact intervals.
    pub fn contact_interval_quantiles(&self, probs: &[f64]) -> Vec<f64> {
        let mut stops: Vec<f64> = self.rows.iter().map(|r| r.stop).collect();
        stops.sort_by(f64::total_cmp);
        probs.iter().map(|&p| empirical_quantile(&stops, p)).collect()
    }

    /// Weighted-copies form: every candidate row becomes an event copy with
    /// weight `p_ij` and a censored copy with weight `1 - p_ij`.
    pub fn weighted_copies(&self, weights: &crate::em::InfectorWeights) -> Vec<PairRiskRow> {
        let mut out = Vec::with_capacity(self.rows.len() + self.infectious_sets.total_candidates());
        for row in &self.rows {
            if row.candidate {
                let p = weights.get(row.susceptible, row.infector).unwrap_or(0.0);
                out.push(PairRiskRow {
                    event: true,
                    weight: row.weight * p,
                    ..row.clone()
                });
                out.push(PairRiskRow {
                    event: false,
                    weight: row.weight * (1.0 - p),
                    ..row.clone()
                });
            } else {
                out.push(row.clone());
            }
        }
        out
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub(crate) fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
