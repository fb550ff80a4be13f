//! Graphical representation, forward reconstruction and the dual processes.
//!
//! A [`GraphicalRep`] materializes every event on `[0, T]` so the same
//! randomness can be replayed upward (forward state) and downward (coalescing
//! or branching dual). Each site carries a rate-1 Poisson clock. Without
//! branching every ring is a voter event `(t, x, y)` with `y` a uniform
//! neighbor of `x`, which is the superposition of the `k` arrow processes of
//! rate `1/k`. With branching parameter `epsilon`, a ring is a branching event
//! with probability `epsilon` and a voter event otherwise. This realizes the
//! perturbation `h = -f + g` with `g = (fraction opposite)^q`, `||g|| = 1`.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::dynamics::Simulator;
use crate::dynamics::QVoterParams;
use crate::lattice::{Configuration, TorusLattice};
use crate::rng::{replica_rng, replica_seed};
use crate::unionfind::DisjointSets;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualityError {
    #[error("horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("branching parameter must lie in [0, 1], got {0}")]
    BadEpsilon(f64),
    #[error("dual time {s} exceeds the horizon {horizon}")]
    DualTooLong { s: f64, horizon: f64 },
    #[error("site set must be nonempty")]
    EmptySet,
    #[error("configuration lives on a different lattice")]
    LatticeMismatch,
    #[error("gadget rates must be nonnegative, got {0:?}")]
    NegativeGadgetRate([f64; 4]),
    #[error("replicate count must be positive")]
    NoReplicates,
}

/// Branching events for a perturbed model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branching {
    pub epsilon: f64,
    /// Exponent in the acceptance function `g = (fraction opposite)^q`.
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RepEvent {
    /// At time `t` site `x` copies its neighbor number `j`.
    Voter { t: f64, x: u32, j: u8 },
    /// At time `t` site `x` flips if `mark < g(neighborhood)`.
    Branch { t: f64, x: u32, mark: f64 },
}

impl RepEvent {
    pub fn time(&self) -> f64 {
        match *self {
            RepEvent::Voter { t, .. } | RepEvent::Branch { t, .. } => t,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphicalRep {
    lattice: Arc<TorusLattice>,
    horizon: f64,
    branching: Option<Branching>,
    events: Vec<RepEvent>,
}

/// Sample every event stream on `[0, horizon]`.
pub fn build_graphical_rep<R: Rng + ?Sized>(
    lattice: Arc<TorusLattice>,
    horizon: f64,
    branching: Option<Branching>,
    rng: &mut R,
) -> Result<GraphicalRep, DualityError> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(DualityError::NonPositiveHorizon(horizon));
    }
    let eps = branching.map_or(0.0, |b| b.epsilon);
    if !(0.0..=1.0).contains(&eps) {
        return Err(DualityError::BadEpsilon(eps));
    }
    let n = lattice.n();
    let k = lattice.k();
    let rate = n as f64;
    let mut events = Vec::with_capacity((rate * horizon * 1.1) as usize + 16);
    let mut t = 0.0;
    loop {
        let e: f64 = Exp1.sample(rng);
        t += e / rate;
        if t > horizon {
            break;
        }
        let x = rng.gen_range(0..n) as u32;
        if eps > 0.0 && rng.gen::<f64>() < eps {
            events.push(RepEvent::Branch {
                t,
                x,
                mark: rng.gen(),
            });
        } else {
            events.push(RepEvent::Voter {
                t,
                x,
                j: rng.gen_range(0..k) as u8,
            });
        }
    }
    Ok(GraphicalRep {
        lattice,
        horizon,
        branching,
        events,
    })
}

impl GraphicalRep {
    /// A representation with an explicit event list, sorted by time.
    pub fn from_events(
        lattice: Arc<TorusLattice>,
        horizon: f64,
        branching: Option<Branching>,
        mut events: Vec<RepEvent>,
    ) -> Result<Self, DualityError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(DualityError::NonPositiveHorizon(horizon));
        }
        events.retain(|e| e.time() <= horizon);
        events.sort_by(|a, b| a.time().total_cmp(&b.time()));
        Ok(Self {
            lattice,
            horizon,
            branching,
            events,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn events(&self) -> &[RepEvent] {
        &self.events
    }

    pub fn lattice(&self) -> &Arc<TorusLattice> {
        &self.lattice
    }

    pub fn voter_event_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, RepEvent::Voter { .. }))
            .count()
    }

    fn accepts(&self, state: &Configuration, x: usize, mark: f64) -> bool {
        let q = self.branching.map_or(1.0, |b| b.q);
        let f = state.discordant_count(x) as f64 / self.lattice.k() as f64;
        f > 0.0 && mark < f.powf(q)
    }
}

/// Apply the events with `t0 < t <= t1` to `state`, in time order.
pub fn forward_between(
    rep: &GraphicalRep,
    state: &Configuration,
    t0: f64,
    t1: f64,
) -> Result<Configuration, DualityError> {
    if state.lattice().n() != rep.lattice.n() || state.lattice().offsets() != rep.lattice.offsets() {
        return Err(DualityError::LatticeMismatch);
    }
    let mut xi = state.clone();
    let start = rep.events.partition_point(|e| e.time() <= t0);
    for ev in &rep.events[start..] {
        match *ev {
            RepEvent::Voter { t, x, j } => {
                if t > t1 {
                    break;
                }
                let y = rep.lattice.step(x as usize, j as usize);
                let v = xi.get(y);
                xi.set(x as usize, v);
            }
            RepEvent::Branch { t, x, mark } => {
                if t > t1 {
                    break;
                }
                if rep.accepts(&xi, x as usize, mark) {
                    xi.flip(x as usize);
                }
            }
        }
    }
    Ok(xi)
}

/// State at the horizon starting from `xi0` at time 0.
pub fn forward_state(rep: &GraphicalRep, xi0: &Configuration) -> Result<Configuration, DualityError> {
    forward_between(rep, xi0, f64::NEG_INFINITY, rep.horizon)
}

/// Dual particles run down the graphical representation from the horizon.
#[derive(Debug, Clone)]
pub struct DualState {
    query: Vec<usize>,
    query_particle: Vec<usize>,
    position: Vec<u32>,
    particles: DisjointSets,
    occupied: HashMap<u32, usize>,
    /// Dual time elapsed, `s`.
    pub clock: f64,
    births: usize,
}

impl DualState {
    fn new(query: &[usize]) -> Self {
        let mut s = Self {
            query: query.to_vec(),
            query_particle: Vec::with_capacity(query.len()),
            position: Vec::new(),
            particles: DisjointSets::new(0),
            occupied: HashMap::new(),
            clock: 0.0,
            births: 0,
        };
        for &b in query {
            let id = match s.occupied.get(&(b as u32)) {
                Some(&id) => id,
                None => s.add_particle(b as u32),
            };
            s.query_particle.push(id);
        }
        s
    }

    fn add_particle(&mut self, site: u32) -> usize {
        let id = self.particles.push();
        self.position.push(site);
        self.occupied.insert(site, id);
        id
    }

    /// Move the particle at `from` to `to`, coalescing on arrival.
    fn jump(&mut self, from: u32, to: u32) {
        if from == to {
            return;
        }
        if let Some(id) = self.occupied.remove(&from) {
            match self.occupied.get(&to) {
                Some(&other) => {
                    self.particles.union_into(other, id);
                }
                None => {
                    self.position[id] = to;
                    self.occupied.insert(to, id);
                }
            }
        }
    }

    fn branch(&mut self, x: u32, targets: &[u32]) {
        if !self.occupied.contains_key(&x) {
            return;
        }
        for &y in targets {
            if !self.occupied.contains_key(&y) {
                self.add_particle(y);
                self.births += 1;
            }
        }
    }

    pub fn query_sites(&self) -> &[usize] {
        &self.query
    }

    /// Current site of the walker started at `query_sites()[i]`.
    pub fn position(&mut self, i: usize) -> usize {
        let root = self.particles.find(self.query_particle[i]);
        self.position[root] as usize
    }

    pub fn positions(&mut self) -> Vec<usize> {
        (0..self.query.len()).map(|i| self.position(i)).collect()
    }

    /// Partition of query indices into coalesced blocks, each block sorted,
    /// blocks ordered by their smallest member.
    pub fn blocks(&mut self) -> Vec<Vec<usize>> {
        let mut by_root: HashMap<usize, Vec<usize>> = HashMap::new();
        for i in 0..self.query.len() {
            let r = self.particles.find(self.query_particle[i]);
            by_root.entry(r).or_default().push(i);
        }
        let mut blocks: Vec<Vec<usize>> = by_root.into_values().collect();
        blocks.sort();
        blocks
    }

    pub fn block_count(&mut self) -> usize {
        self.blocks().len()
    }

    /// Sites occupied by dual particles: the influence set.
    pub fn influence_set(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.occupied.keys().map(|&s| s as usize).collect();
        v.sort_unstable();
        v
    }

    pub fn particle_count(&self) -> usize {
        self.occupied.len()
    }

    pub fn births(&self) -> usize {
        self.births
    }
}

/// Run the dual from the horizon down to `horizon - s_max`, recording the
/// particle count after each event when `trace` is given.
pub fn dual_crw_traced(
    rep: &GraphicalRep,
    sites: &[usize],
    s_max: f64,
    mut trace: Option<&mut Vec<usize>>,
) -> Result<DualState, DualityError> {
    if sites.is_empty() {
        return Err(DualityError::EmptySet);
    }
    if s_max > rep.horizon {
        return Err(DualityError::DualTooLong {
            s: s_max,
            horizon: rep.horizon,
        });
    }
    let mut state = DualState::new(sites);
    let floor = rep.horizon - s_max;
    for ev in rep.events.iter().rev() {
        let t = ev.time();
        if t <= floor {
            break;
        }
        match *ev {
            RepEvent::Voter { x, j, .. } => {
                let y = rep.lattice.step(x as usize, j as usize) as u32;
                state.jump(x, y);
            }
            RepEvent::Branch { x, .. } => {
                state.branch(x, rep.lattice.neighbor_slice(x as usize));
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(state.particle_count());
        }
    }
    state.clock = s_max.max(0.0);
    Ok(state)
}

/// Dual started from `sites` at the horizon and run for dual time `s_max`.
pub fn dual_crw(rep: &GraphicalRep, sites: &[usize], s_max: f64) -> Result<DualState, DualityError> {
    dual_crw_traced(rep, sites, s_max, None)
}

/// Monte Carlo estimates of both sides of
/// `P(xi^A_t meets B) = P(A meets zeta^B_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityCheck {
    pub p_forward: f64,
    pub se_forward: f64,
    pub p_dual: f64,
    pub se_dual: f64,
}

impl DualityCheck {
    pub fn discrepancy(&self) -> f64 {
        (self.p_forward - self.p_dual).abs()
    }

    /// Standard error of the difference of the two independent estimates.
    pub fn combined_se(&self) -> f64 {
        self.se_forward.hypot(self.se_dual)
    }
}

fn binomial_estimate(hits: usize, n: usize) -> (f64, f64) {
    let p = hits as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt())
}

/// Estimate both sides independently: the forward side runs the kinetic
/// voter simulator from `1_A`, the dual side runs coalescing walks from `B`
/// on fresh graphical representations.
pub fn check_duality(
    lattice: Arc<TorusLattice>,
    a: &[usize],
    b: &[usize],
    t: f64,
    replicates: usize,
    seed: u64,
) -> Result<DualityCheck, DualityError> {
    if a.is_empty() || b.is_empty() {
        return Err(DualityError::EmptySet);
    }
    if replicates == 0 {
        return Err(DualityError::NoReplicates);
    }
    let start = Configuration::indicator(lattice.clone(), a);
    let voter = QVoterParams::voter();
    let forward_seed = replica_seed(seed, 0);
    let dual_seed = replica_seed(seed, 1);
    let mut forward_hits = 0;
    let mut dual_hits = 0;
    for i in 0..replicates as u64 {
        let hit = if t <= 0.0 {
            b.iter().any(|&s| start.get(s))
        } else {
            let mut rng = replica_rng(forward_seed, i);
            let mut sim = Simulator::new(&start, &voter).expect("voter rates are valid");
            sim.advance_to(t, &mut rng);
            b.iter().any(|&s| sim.opinion(s))
        };
        forward_hits += hit as usize;

        let hit = if t <= 0.0 {
            b.iter().any(|s| a.contains(s))
        } else {
            let mut rng = replica_rng(dual_seed, i);
            let rep = build_graphical_rep(lattice.clone(), t, None, &mut rng)?;
            let mut dual = dual_crw(&rep, b, t)?;
            dual.positions().iter().any(|p| a.contains(p))
        };
        dual_hits += hit as usize;
    }
    let (p_forward, se_forward) = binomial_estimate(forward_hits, replicates);
    let (p_dual, se_dual) = binomial_estimate(dual_hits, replicates);
    Ok(DualityCheck {
        p_forward,
        se_forward,
        p_dual,
        se_dual,
    })
}

/// Flip rates produced by arrow-delta gadgets on a 4-neighbor site.
#[derive(Debug, Clone, PartialEq)]
pub struct GadgetTable {
    /// Row `n` holds `(rate 1->0, rate 0->1)` when `n` neighbors disagree.
    pub rows: [(f64, f64); 5],
    /// Some `n` in `1..=3` has `rate(1->0) < rate(0->1)`.
    pub asymmetric: bool,
}

fn binom(n: usize, r: usize) -> f64 {
    if r > n {
        return 0.0;
    }
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Rates generated by gadgets made of a delta at `x` and `j` arrows from
/// distinct neighbors, each gadget with `j` arrows firing at rate `a_j`.
///
/// A 1 at `x` survives only if some arrowed neighbor is 1, so it flips when
/// all `j` arrows come from the `n` disagreeing neighbors: `C(n, j)` gadgets.
/// A 0 at `x` flips when at least one arrow comes from a disagreeing neighbor:
/// `C(4, j) - C(4 - n, j)` gadgets.
pub fn gadget_flip_rates(a: [f64; 4]) -> Result<GadgetTable, DualityError> {
    if a.iter().any(|&v| v < 0.0 || v.is_nan()) {
        return Err(DualityError::NegativeGadgetRate(a));
    }
    let mut rows = [(0.0, 0.0); 5];
    for (n, row) in rows.iter_mut().enumerate() {
        let mut down = 0.0;
        let mut up = 0.0;
        for j in 1..=4 {
            down += a[j - 1] * binom(n, j);
            up += a[j - 1] * (binom(4, j) - binom(4 - n, j));
        }
        *row = (down, up);
    }
    let asymmetric = (1..=3).any(|n| rows[n].0 < rows[n].1);
    Ok(GadgetTable { rows, asymmetric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::product_measure;
    use crate::rng::rng_from_seed;

    fn nn(l: usize) -> Arc<TorusLattice> {
        Arc::new(TorusLattice::nearest_neighbor(l).unwrap())
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = nn(3);
        let mut rng = rng_from_seed(0);
        assert!(build_graphical_rep(t.clone(), 0.0, None, &mut rng).is_err());
        let bad = Branching { epsilon: 1.5, q: 0.9 };
        assert!(build_graphical_rep(t.clone(), 1.0, Some(bad), &mut rng).is_err());
        let rep = build_graphical_rep(t.clone(), 1.0, None, &mut rng).unwrap();
        assert_eq!(dual_crw(&rep, &[], 1.0).unwrap_err(), DualityError::EmptySet);
        assert!(dual_crw(&rep, &[0], 2.0).is_err());
        let other = Arc::new(TorusLattice::nearest_neighbor(4).unwrap());
        assert!(forward_state(&rep, &Configuration::zeros(other)).is_err());
    }

    #[test]
    fn tiny_horizon_has_no_events() {
        let t = nn(3);
        let mut rng = rng_from_seed(2);
        let empty = (0..200)
            .filter(|_| {
                build_graphical_rep(t.clone(), 1e-6, None, &mut rng)
                    .unwrap()
                    .events()
                    .is_empty()
            })
            .count();
        assert!(empty >= 195);
    }

    #[test]
    fn event_count_mean_is_n_t() {
        let t = nn(4);
        let mut rng = rng_from_seed(3);
        let reps = 400;
        let total: usize = (0..reps)
            .map(|_| build_graphical_rep(t.clone(), 2.0, None, &mut rng).unwrap().voter_event_count())
            .sum();
        let mean = total as f64 / reps as f64;
        // Poisson(128): sd of the mean is sqrt(128/400)
        assert!((mean - 128.0).abs() < 4.0 * (128.0f64 / 400.0).sqrt());
    }

    #[test]
    fn no_events_means_identity_and_single_event_copies() {
        let t = nn(3);
        let xi = Configuration::indicator(t.clone(), &[0, 5, 9]);
        let rep = GraphicalRep::from_events(t.clone(), 1.0, None, vec![]).unwrap();
        assert_eq!(forward_state(&rep, &xi).unwrap(), xi);
        let ev = RepEvent::Voter { t: 0.5, x: 1, j: 1 };
        let rep = GraphicalRep::from_events(t.clone(), 1.0, None, vec![ev]).unwrap();
        let out = forward_state(&rep, &xi).unwrap();
        let y = t.step(1, 1);
        assert_eq!(out.get(1), xi.get(y));
        for s in (0..27).filter(|&s| s != 1) {
            assert_eq!(out.get(s), xi.get(s));
        }
    }

    #[test]
    fn zero_dual_time_is_discrete() {
        let t = nn(3);
        let mut rng = rng_from_seed(4);
        let rep = build_graphical_rep(t.clone(), 1.0, None, &mut rng).unwrap();
        let mut d = dual_crw(&rep, &[1, 2, 3], 0.0).unwrap();
        assert_eq!(d.positions(), vec![1, 2, 3]);
        assert_eq!(d.block_count(), 3);
    }

    #[test]
    fn pathwise_duality_small_torus() {
        let t = nn(3);
        let all: Vec<usize> = (0..27).collect();
        for seed in 0..50 {
            let mut rng = rng_from_seed(seed);
            let rep = build_graphical_rep(t.clone(), 1.0, None, &mut rng).unwrap();
            let xi0 = product_measure(t.clone(), 0.5, &mut rng).unwrap();
            let xi_t = forward_state(&rep, &xi0).unwrap();
            let mut dual = dual_crw(&rep, &all, 1.0).unwrap();
            for x in 0..27 {
                assert_eq!(xi_t.get(x), xi0.get(dual.position(x)));
            }
        }
    }

    #[test]
    fn monotone_and_additive() {
        let t = nn(4);
        for seed in 0..30 {
            let mut rng = rng_from_seed(seed);
            let rep = build_graphical_rep(t.clone(), 1.5, None, &mut rng).unwrap();
            let a = product_measure(t.clone(), 0.3, &mut rng).unwrap();
            let b = product_measure(t.clone(), 0.3, &mut rng).unwrap();
            let ab = a.or(&b);
            let fa = forward_state(&rep, &a).unwrap();
            let fb = forward_state(&rep, &b).unwrap();
            let fab = forward_state(&rep, &ab).unwrap();
            assert!(fa.le(&fab) && fb.le(&fab));
            assert_eq!(fab, fa.or(&fb));
        }
    }

    #[test]
    fn coalescence_is_permanent_and_counts_monotone() {
        let t = nn(4);
        let mut rng = rng_from_seed(8);
        let rep = build_graphical_rep(t.clone(), 3.0, None, &mut rng).unwrap();
        let sites: Vec<usize> = (0..64).collect();
        let mut trace = Vec::new();
        let mut d = dual_crw_traced(&rep, &sites, 3.0, Some(&mut trace)).unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        for block in d.blocks() {
            let p = d.position(block[0]);
            assert!(block.iter().all(|&i| d.position(i) == p));
        }
        // blocks of a shorter run refine those of the longer run
        let mut short = dual_crw(&rep, &sites, 1.5).unwrap();
        let long_blocks = d.blocks();
        for b in short.blocks() {
            assert!(long_blocks.iter().any(|lb| b.iter().all(|i| lb.contains(i))));
        }
    }

    #[test]
    fn branching_dual_grows_by_at_most_k() {
        let t = nn(5);
        let mut rng = rng_from_seed(9);
        let br = Some(Branching { epsilon: 0.3, q: 0.9 });
        let rep = build_graphical_rep(t.clone(), 2.0, br, &mut rng).unwrap();
        let mut trace = Vec::new();
        let d = dual_crw_traced(&rep, &[0, 40], 2.0, Some(&mut trace)).unwrap();
        let mut prev = 2;
        for &c in &trace {
            assert!(c <= prev + 6);
            prev = c;
        }
        assert_eq!(d.particle_count(), *trace.last().unwrap_or(&2));
    }

    #[test]
    fn influence_set_determines_the_query_sites() {
        let t = nn(4);
        let br = Some(Branching { epsilon: 0.25, q: 0.8 });
        for seed in 0..40 {
            let mut rng = rng_from_seed(seed);
            let rep = build_graphical_rep(t.clone(), 2.0, br, &mut rng).unwrap();
            let xi0 = product_measure(t.clone(), 0.5, &mut rng).unwrap();
            let s = 1.2;
            let mid = forward_between(&rep, &xi0, f64::NEG_INFINITY, 2.0 - s).unwrap();
            let truth = forward_state(&rep, &xi0).unwrap();
            let b = [3usize, 17, 42];
            let dual = dual_crw(&rep, &b, s).unwrap();
            let keep = dual.influence_set();
            // everything outside the influence set is replaced by noise
            let noisy = Configuration::from_fn(t.clone(), |i| {
                if keep.binary_search(&i).is_ok() {
                    mid.get(i)
                } else {
                    rng.gen::<bool>()
                }
            });
            let rebuilt = forward_between(&rep, &noisy, 2.0 - s, 2.0).unwrap();
            for &x in &b {
                assert_eq!(rebuilt.get(x), truth.get(x), "seed {seed} site {x}");
            }
        }
    }

    #[test]
    fn duality_trivial_cases() {
        let t = nn(3);
        let all: Vec<usize> = (0..27).collect();
        let c = check_duality(t.clone(), &[0, 1], &[1, 2], 0.0, 10, 1).unwrap();
        assert_eq!((c.p_forward, c.p_dual), (1.0, 1.0));
        let c = check_duality(t.clone(), &[0], &[5], 0.0, 10, 1).unwrap();
        assert_eq!((c.p_forward, c.p_dual), (0.0, 0.0));
        let c = check_duality(t.clone(), &all, &[4, 9], 0.7, 200, 1).unwrap();
        assert_eq!((c.p_forward, c.p_dual), (1.0, 1.0));
        assert!(check_duality(t, &[], &[1], 1.0, 10, 1).is_err());
    }

    #[test]
    fn gadget_table_linear_case() {
        let g = gadget_flip_rates([1.0, 0.0, 0.0, 0.0]).unwrap();
        for n in 0..5 {
            assert_eq!(g.rows[n], (n as f64, n as f64));
        }
        assert!(!g.asymmetric);
        let g = gadget_flip_rates([0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.rows[1], (0.0, 3.0));
        assert!(g.asymmetric);
        assert!(gadget_flip_rates([1.0, -0.1, 0.0, 0.0]).is_err());
    }
}
