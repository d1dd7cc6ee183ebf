//! Small-world networks and event-driven epidemics with Weibull contact
//! intervals.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1};
use serde::{Deserialize, Serialize};

use crate::data::{
    build_pair_rows, default_terms, AnalysisMode, ContactSet, LineList, LineListRecord, PairPolicy, PairTable,
};
use crate::error::{Error, Result};
use crate::relrisk::RelRisk;

/// Undirected graph as sorted adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub adjacency: Vec<Vec<u32>>,
    /// Number of ring edges moved to a new endpoint.
    pub rewired: usize,
}

impl Network {
    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// Both orientations of every edge.
    pub fn contact_set(&self) -> ContactSet {
        let mut set = ContactSet::new(Vec::new());
        for (u, nbrs) in self.adjacency.iter().enumerate() {
            for &v in nbrs {
                set.insert(u as u64, v as u64, Vec::new()).expect("simple graph");
            }
        }
        set
    }
}

/// Watts-Strogatz graph: a ring where each node links to its `k` nearest
/// neighbors, then each edge `(u, u + j)` is rewired with probability `p` to
/// `(u, w)` for a uniform `w` that is neither `u` nor already adjacent.
pub fn watts_strogatz<R: Rng>(n: usize, k: usize, p: f64, rng: &mut R) -> Result<Network> {
    if !k.is_multiple_of(2) || k >= n {
        return Err(Error::InvalidParameter(format!("need even k < n, got k = {k}, n = {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("rewiring probability {p} outside [0, 1]")));
    }
    let mut adj: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    for u in 0..n {
        for j in 1..=k / 2 {
            let v = (u + j) % n;
            adj[u].insert(v as u32);
            adj[v].insert(u as u32);
        }
    }
    let mut rewired = 0;
    for j in 1..=k / 2 {
        for u in 0..n {
            let v = ((u + j) % n) as u32;
            if !(rng.random::<f64>() < p) {
                continue;
            }
            if adj[u].len() >= n - 1 || !adj[u].contains(&v) {
                continue;
            }
            let w = loop {
                let w = rng.random_range(0..n) as u32;
                if w as usize != u && !adj[u].contains(&w) {
                    break w;
                }
            };
            adj[u].remove(&v);
            adj[v as usize].remove(&(u as u32));
            adj[u].insert(w);
            adj[w as usize].insert(u as u32);
            rewired += 1;
        }
    }
    Ok(Network {
        adjacency: adj.into_iter().map(|s| s.into_iter().collect()).collect(),
        rewired,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpidemicConfig {
    pub n_nodes: usize,
    pub ws_neighbors: usize,
    pub rewire_prob: f64,
    pub weibull_shape: f64,
    pub weibull_rate: f64,
    pub infectious_mean: f64,
    pub latent: f64,
    /// True `(beta_inf, beta_sus, beta_pair)`.
    pub beta: [f64; 3],
    pub relrisk: RelRisk,
    pub stop_after_infections: usize,
    pub seed: u64,
}

impl Default for EpidemicConfig {
    fn default() -> Self {
        EpidemicConfig {
            n_nodes: 50_000,
            ws_neighbors: 10,
            rewire_prob: 0.1,
            weibull_shape: 0.5,
            weibull_rate: 0.2,
            infectious_mean: 1.0,
            latent: 0.0,
            beta: [0.0; 3],
            relrisk: RelRisk::Loglinear,
            stop_after_infections: 1000,
            seed: 1,
        }
    }
}

impl EpidemicConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.weibull_shape > 0.0 && self.weibull_rate > 0.0) {
            return bad("Weibull shape and rate must be positive".into());
        }
        if !(self.infectious_mean > 0.0) {
            return bad("infectious_mean must be positive".into());
        }
        if !(self.latent >= 0.0 && self.latent.is_finite()) {
            return bad("latent period must be finite and nonnegative".into());
        }
        if !self.ws_neighbors.is_multiple_of(2) || self.ws_neighbors >= self.n_nodes {
            return bad("ws_neighbors must be even and below n_nodes".into());
        }
        if !(0.0..=1.0).contains(&self.rewire_prob) {
            return bad("rewire_prob must be in [0, 1]".into());
        }
        if self.stop_after_infections == 0 {
            return bad("stop_after_infections must be positive".into());
        }
        Ok(())
    }

    /// Baseline cumulative hazard `(gamma tau)^alpha`.
    pub fn cumhaz(&self, tau: f64) -> f64 {
        (self.weibull_rate * tau.max(0.0)).powf(self.weibull_shape)
    }
}

/// One contact interval drawn for a susceptible neighbor at the onset of
/// infectiousness of `infector`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContactDraw {
    pub infector: u64,
    pub susceptible: u64,
    pub tau: f64,
    pub infectious_period: f64,
    /// `tau` fell within the infectious period, so contact was scheduled.
    pub within_infectious_period: bool,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub config: EpidemicConfig,
    pub line_list: LineList,
    pub contacts: ContactSet,
    /// True infector of every non-imported infectee.
    pub infector: BTreeMap<u64, u64>,
    pub index_case: u64,
    /// Observation limit applied to everyone.
    pub cutoff: f64,
    /// False when the epidemic died out before the target.
    pub reached_target: bool,
    pub draws: Vec<ContactDraw>,
    pub rewired_edges: usize,
    pub n_edges: usize,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    time: f64,
    seq: u64,
    infector: u32,
    target: u32,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    /// Reversed so that `BinaryHeap` pops the earliest contact.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

fn edge_key(a: u32, b: u32) -> (u32, u32) {
    (a.min(b), a.max(b))
}

/// Simulates one epidemic from a single index case at time 0.
pub fn simulate_epidemic(config: &EpidemicConfig) -> Result<SimOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = watts_strogatz(config.n_nodes, config.ws_neighbors, config.rewire_prob, &mut rng)?;
    let n = config.n_nodes;

    let inf_x: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
    let sus_x: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
    let mut pair_x: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for (u, nbrs) in net.adjacency.iter().enumerate() {
        for &v in nbrs {
            if (u as u32) < v {
                pair_x.insert((u as u32, v), f64::from(rng.random_bool(0.5)));
            }
        }
    }

    let infectious = Exp::new(1.0 / config.infectious_mean).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let [b_inf, b_sus, b_pair] = config.beta;
    let inv_shape = 1.0 / config.weibull_shape;

    let mut t_inf = vec![f64::INFINITY; n];
    let mut iota = vec![f64::NAN; n];
    let mut infector = BTreeMap::new();
    let mut draws = Vec::new();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let index = rng.random_range(0..n);
    let mut infected_after_index = 0usize;
    let mut last_time = 0.0;

    // Infect `node` at `time` and schedule its infectious contacts.
    let mut infect = |node: usize, time: f64, rng: &mut ChaCha8Rng, t_inf: &mut [f64], iota: &mut [f64], heap: &mut BinaryHeap<Pending>| -> Result<()> {
        t_inf[node] = time;
        let period = infectious.sample(rng);
        iota[node] = period;
        let onset = time + config.latent;
        for &nb in &net.adjacency[node] {
            if t_inf[nb as usize].is_finite() {
                continue;
            }
            let eta = b_inf * inf_x[node] + b_sus * sus_x[nb as usize] + b_pair * pair_x[&edge_key(node as u32, nb)];
            let r = config.relrisk.value(eta)?;
            let e: f64 = Exp1.sample(rng);
            let tau = (e / r).powf(inv_shape) / config.weibull_rate;
            let within = tau <= period;
            draws.push(ContactDraw {
                infector: node as u64,
                susceptible: nb as u64,
                tau,
                infectious_period: period,
                within_infectious_period: within,
            });
            if within {
                heap.push(Pending {
                    time: onset + tau,
                    seq,
                    infector: node as u32,
                    target: nb,
                });
                seq += 1;
            }
        }
        Ok(())
    };

    infect(index, 0.0, &mut rng, &mut t_inf, &mut iota, &mut heap)?;
    let mut reached_target = false;
    while let Some(ev) = heap.pop() {
        let j = ev.target as usize;
        if t_inf[j].is_finite() {
            continue;
        }
        infector.insert(j as u64, ev.infector as u64);
        last_time = ev.time;
        infect(j, ev.time, &mut rng, &mut t_inf, &mut iota, &mut heap)?;
        infected_after_index += 1;
        if infected_after_index == config.stop_after_infections {
            reached_target = true;
            break;
        }
    }
    let cutoff = if reached_target {
        last_time
    } else {
        // Died out: everyone has been removed by the last removal time.
        (0..n)
            .filter(|&k| t_inf[k].is_finite())
            .map(|k| t_inf[k] + config.latent + iota[k])
            .fold(last_time, f64::max)
    };

    let records = (0..n)
        .map(|k| LineListRecord {
            id: k as u64,
            group: None,
            t_infection: t_inf[k],
            latent: if t_inf[k].is_finite() { config.latent } else { 0.0 },
            infectious_period: t_inf[k].is_finite().then_some(iota[k]),
            obs_limit: cutoff,
            imported: k == index,
            infector: infector.get(&(k as u64)).copied(),
            covariates: vec![Some(inf_x[k]), Some(sus_x[k])],
        })
        .collect();
    let line_list = LineList::new(vec!["inf_x".into(), "sus_x".into()], records)?;
    let mut contacts = ContactSet::new(vec!["pair_x".into()]);
    for (u, nbrs) in net.adjacency.iter().enumerate() {
        for &v in nbrs {
            contacts.insert(u as u64, v as u64, vec![Some(pair_x[&edge_key(u as u32, v)])])?;
        }
    }
    Ok(SimOutput {
        config: config.clone(),
        line_list,
        contacts,
        infector,
        index_case: index as u64,
        cutoff,
        reached_target,
        draws,
        rewired_edges: net.rewired,
        n_edges: net.n_edges(),
    })
}

impl SimOutput {
    /// Pair rows with the three simulation covariates.
    pub fn pair_table(&self, mode: AnalysisMode) -> Result<PairTable> {
        let policy = PairPolicy {
            mode,
            terms: default_terms(&self.line_list, &self.contacts),
            ..PairPolicy::default()
        };
        build_pair_rows(&self.line_list, &self.contacts, &policy)
    }

    pub fn n_infected(&self) -> usize {
        self.line_list.records.iter().filter(|r| r.is_infected()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> EpidemicConfig {
        EpidemicConfig {
            n_nodes: 500,
            stop_after_infections: 60,
            seed,
            ..EpidemicConfig::default()
        }
    }

    #[test]
    fn ring_lattice_without_rewiring() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = watts_strogatz(100, 10, 0.0, &mut rng).unwrap();
        assert!((0..100).all(|u| net.degree(u) == 10));
        assert_eq!(net.rewired, 0);
        assert_eq!(net.n_edges(), 500);
    }

    #[test]
    fn rewiring_keeps_edge_count_and_simplicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = watts_strogatz(1000, 10, 0.1, &mut rng).unwrap();
        assert_eq!(net.n_edges(), 5000);
        for (u, nbrs) in net.adjacency.iter().enumerate() {
            assert!(!nbrs.contains(&(u as u32)));
            assert!(nbrs.windows(2).all(|w| w[0] < w[1]));
        }
        let frac = net.rewired as f64 / 5000.0;
        assert!((frac - 0.1).abs() < 0.02, "{frac}");
    }

    #[test]
    fn invalid_network_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(watts_strogatz(10, 3, 0.1, &mut rng).is_err());
        assert!(watts_strogatz(10, 10, 0.1, &mut rng).is_err());
        assert!(watts_strogatz(10, 4, 1.5, &mut rng).is_err());
    }

    #[test]
    fn seeded_runs_are_identical() {
        let a = simulate_epidemic(&small(11)).unwrap();
        let b = simulate_epidemic(&small(11)).unwrap();
        assert_eq!(a.line_list.records, b.line_list.records);
        assert_eq!(a.infector, b.infector);
        assert_eq!(a.draws, b.draws);
    }

    #[test]
    fn true_infector_is_a_possible_infector() {
        let sim = (0..20)
            .map(|s| simulate_epidemic(&small(s)).unwrap())
            .find(|s| s.reached_target)
            .expect("some epidemic takes off");
        assert_eq!(sim.infector.len(), 60);
        let table = sim.pair_table(AnalysisMode::CompleteData).unwrap();
        for (&j, &i) in &sim.infector {
            assert!(table.infectious_sets.contains(j, i));
        }
        assert_eq!(table.rows.iter().filter(|r| r.event).count(), 60);
    }

    #[test]
    fn very_negative_infectiousness_blocks_transmission() {
        let mut cfg = small(5);
        cfg.beta = [-30.0, 0.0, 0.0];
        let sim = simulate_epidemic(&cfg).unwrap();
        for (&j, &i) in &sim.infector {
            let rec = sim.line_list.get(i).unwrap();
            assert_eq!(rec.covariates[0], Some(0.0), "infector of {j} had inf_x = 1");
        }
    }
}
