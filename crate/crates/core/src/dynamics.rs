//! Exact continuous-time simulation of the q-voter model and of voter-model
//! perturbations with a rate table `r^k`.
//!
//! The simulator keeps the set `A` of sites with at least one discordant
//! neighbor. Proposals arrive at total rate `|A| * r_cap`; a proposed site is
//! uniform on `A` and flips with probability `rate(x) / r_cap`. Per-site
//! rates depend only on the discordant count, so acceptance is a table
//! lookup and each flip touches `O(k)` bookkeeping.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::lattice::{Configuration, LatticeError, TorusLattice};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("rate table must satisfy r_0 = 0, got {0}")]
    NonzeroBaseRate(f64),
    #[error("rate table has {got} entries but the neighborhood needs {expected}")]
    RateTableSize { expected: usize, got: usize },
    #[error("flip rate {rate} is negative when {count} neighbors disagree")]
    NegativeRate { count: usize, rate: f64 },
    #[error("time horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("window ({0}, {1}) is not inside [0, t_max]")]
    BadWindow(f64, f64),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Perturbation values `r^k_0, ..., r^k_k` indexed by the number of
/// disagreeing neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    values: Vec<f64>,
}

impl RateTable {
    pub fn new(values: Vec<f64>) -> Result<Self, DynamicsError> {
        if values.len() < 4 {
            return Err(DynamicsError::InvalidParameter(format!(
                "rate table needs k >= 3, got {} entries",
                values.len()
            )));
        }
        if values[0] != 0.0 {
            return Err(DynamicsError::NonzeroBaseRate(values[0]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidParameter("non-finite rate".into()));
        }
        Ok(Self { values })
    }

    pub fn k(&self) -> usize {
        self.values.len() - 1
    }

    pub fn get(&self, count: usize) -> f64 {
        self.values[count]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn negated(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| if *v == 0.0 { 0.0 } else { -v }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlipRule {
    /// Flip at rate `f_x^q`.
    DirectQ { q: f64 },
    /// Flip at rate `f_x + epsilon * r^k_{n(x)}`.
    Perturbation { epsilon: f64, rates: RateTable },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QVoterParams {
    pub rule: FlipRule,
}

impl QVoterParams {
    pub fn direct(q: f64) -> Result<Self, DynamicsError> {
        if !(q.is_finite() && q > 0.0) {
            return Err(DynamicsError::InvalidParameter(format!("q must be positive, got {q}")));
        }
        Ok(Self {
            rule: FlipRule::DirectQ { q },
        })
    }

    /// The linear voter model.
    pub fn voter() -> Self {
        Self {
            rule: FlipRule::DirectQ { q: 1.0 },
        }
    }

    pub fn perturbation(epsilon: f64, rates: RateTable) -> Result<Self, DynamicsError> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(DynamicsError::InvalidParameter(format!(
                "epsilon must be nonnegative, got {epsilon}"
            )));
        }
        Ok(Self {
            rule: FlipRule::Perturbation { epsilon, rates },
        })
    }

    /// The exponent `q` for direct mode, `None` in perturbation mode.
    pub fn q(&self) -> Option<f64> {
        match self.rule {
            FlipRule::DirectQ { q } => Some(q),
            FlipRule::Perturbation { .. } => None,
        }
    }

    /// Flip rate as a function of the discordant count `0..=k`, validated
    /// to be nonnegative.
    pub fn rates_by_count(&self, k: usize) -> Result<Vec<f64>, DynamicsError> {
        let kf = k as f64;
        let rates: Vec<f64> = match &self.rule {
            FlipRule::DirectQ { q } => (0..=k)
                .map(|n| if n == 0 { 0.0 } else { (n as f64 / kf).powf(*q) })
                .collect(),
            FlipRule::Perturbation { epsilon, rates } => {
                if rates.k() != k {
                    return Err(DynamicsError::RateTableSize {
                        expected: k + 1,
                        got: rates.values.len(),
                    });
                }
                (0..=k)
                    .map(|n| n as f64 / kf + epsilon * rates.get(n))
                    .collect()
            }
        };
        if let Some((count, &rate)) = rates.iter().enumerate().find(|(_, r)| **r < 0.0) {
            return Err(DynamicsError::NegativeRate { count, rate });
        }
        Ok(rates)
    }
}

/// Instantaneous flip rate of `site` under `params`.
pub fn flip_rate(config: &Configuration, site: usize, params: &QVoterParams) -> Result<f64, DynamicsError> {
    let lattice = config.lattice();
    if site >= lattice.n() {
        return Err(LatticeError::SiteOutOfRange { site, n: lattice.n() }.into());
    }
    let rates = params.rates_by_count(lattice.k())?;
    Ok(rates[config.discordant_count(site)])
}

/// Independent Bernoulli(`u`) opinions at every site.
pub fn product_measure<R: Rng + ?Sized>(
    lattice: Arc<TorusLattice>,
    u: f64,
    rng: &mut R,
) -> Result<Configuration, DynamicsError> {
    if !(0.0..=1.0).contains(&u) {
        return Err(DynamicsError::InvalidParameter(format!("density {u} outside [0, 1]")));
    }
    Ok(Configuration::from_fn(lattice, |_| rng.gen::<f64>() < u))
}

/// Outcome of a single proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step {
    Flip { site: usize },
    /// Proposal rejected; only time advanced.
    Null,
    /// The next proposal would fall after the time limit; the clock now reads the limit.
    Limit,
    /// No site can ever flip again.
    Absorbed,
}

/// Incremental state of a single run.
#[derive(Debug, Clone)]
pub struct Simulator {
    lattice: Arc<TorusLattice>,
    state: Vec<u8>,
    disc: Vec<u8>,
    active: Vec<u32>,
    slot: Vec<u32>,
    hist: Vec<usize>,
    rates: Vec<f64>,
    accept: Vec<f64>,
    r_cap: f64,
    ones: usize,
    time: f64,
    events: u64,
    absorbed_at: Option<f64>,
}

const INACTIVE: u32 = u32::MAX;

impl Simulator {
    pub fn new(config: &Configuration, params: &QVoterParams) -> Result<Self, DynamicsError> {
        let lattice = config.lattice().clone();
        let k = lattice.k();
        let rates = params.rates_by_count(k)?;
        let r_cap = rates.iter().cloned().fold(0.0, f64::max);
        let accept = rates
            .iter()
            .map(|r| if r_cap > 0.0 { r / r_cap } else { 0.0 })
            .collect();
        let n = lattice.n();
        let state = config.to_bits();
        let mut sim = Self {
            disc: vec![0; n],
            active: Vec::new(),
            slot: vec![INACTIVE; n],
            hist: vec![0; k + 1],
            rates,
            accept,
            r_cap,
            ones: config.ones_count(),
            time: 0.0,
            events: 0,
            absorbed_at: None,
            state,
            lattice,
        };
        for x in 0..n {
            let me = sim.state[x];
            let d = sim
                .lattice
                .neighbor_slice(x)
                .iter()
                .filter(|&&y| sim.state[y as usize] != me)
                .count();
            sim.disc[x] = d as u8;
            sim.hist[d] += 1;
            if d > 0 {
                sim.slot[x] = sim.active.len() as u32;
                sim.active.push(x as u32);
            }
        }
        Ok(sim)
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Number of accepted flips so far.
    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn ones_count(&self) -> usize {
        self.ones
    }

    pub fn density(&self) -> f64 {
        self.ones as f64 / self.state.len() as f64
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn is_absorbed(&self) -> bool {
        self.active.is_empty()
    }

    /// Time of the flip that emptied the active set, if any.
    pub fn absorbed_at(&self) -> Option<f64> {
        self.absorbed_at
    }

    pub fn opinion(&self, site: usize) -> bool {
        self.state[site] == 1
    }

    pub fn discordant_count(&self, site: usize) -> usize {
        self.disc[site] as usize
    }

    /// Sum over sites of the discordant counts; for symmetric neighborhoods
    /// this is twice the number of discordant edges.
    pub fn discordant_sum(&self) -> usize {
        self.hist.iter().enumerate().map(|(d, c)| d * c).sum()
    }

    /// Total flip rate summed over all sites.
    pub fn total_rate(&self) -> f64 {
        self.hist
            .iter()
            .zip(&self.rates)
            .map(|(c, r)| *c as f64 * r)
            .sum()
    }

    pub fn configuration(&self) -> Configuration {
        Configuration::from_fn(self.lattice.clone(), |i| self.state[i] == 1)
    }

    pub fn lattice(&self) -> &Arc<TorusLattice> {
        &self.lattice
    }

    #[inline]
    fn set_activity(&mut self, x: usize) {
        let is_active = self.slot[x] != INACTIVE;
        let should = self.disc[x] > 0;
        if should && !is_active {
            self.slot[x] = self.active.len() as u32;
            self.active.push(x as u32);
        } else if !should && is_active {
            let pos = self.slot[x] as usize;
            let last = self.active.pop().unwrap();
            if last as usize != x {
                self.active[pos] = last;
                self.slot[last as usize] = pos as u32;
            }
            self.slot[x] = INACTIVE;
        }
    }

    /// Flip `site` and update every cached quantity.
    pub fn flip(&mut self, site: usize) {
        let k = self.lattice.k();
        let new = self.state[site] ^ 1;
        self.state[site] = new;
        if new == 1 {
            self.ones += 1;
        } else {
            self.ones -= 1;
        }
        let old_d = self.disc[site] as usize;
        self.hist[old_d] -= 1;
        self.hist[k - old_d] += 1;
        self.disc[site] = (k - old_d) as u8;
        self.set_activity(site);
        let lattice = self.lattice.clone();
        for &w in lattice.in_neighbor_slice(site) {
            let w = w as usize;
            let d = self.disc[w] as usize;
            let nd = if self.state[w] == new { d - 1 } else { d + 1 };
            self.hist[d] -= 1;
            self.hist[nd] += 1;
            self.disc[w] = nd as u8;
            self.set_activity(w);
        }
        self.events += 1;
    }

    /// Draw the next proposal, stopping at `t_limit`.
    #[inline]
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R, t_limit: f64) -> Step {
        if self.active.is_empty() {
            return Step::Absorbed;
        }
        let total = self.active.len() as f64 * self.r_cap;
        let e: f64 = Exp1.sample(rng);
        let t = self.time + e / total;
        if t > t_limit {
            self.time = t_limit;
            return Step::Limit;
        }
        self.time = t;
        let x = self.active[rng.gen_range(0..self.active.len())] as usize;
        let a = self.accept[self.disc[x] as usize];
        if a >= 1.0 || rng.gen::<f64>() < a {
            self.flip(x);
            if self.active.is_empty() {
                self.absorbed_at = Some(self.time);
            }
            Step::Flip { site: x }
        } else {
            Step::Null
        }
    }

    /// Run until the clock reads `t` or the state is absorbed. On absorption
    /// the clock is still moved to `t` since nothing can happen afterwards.
    pub fn advance_to<R: Rng + ?Sized>(&mut self, t: f64, rng: &mut R) {
        loop {
            match self.step(rng, t) {
                Step::Limit => return,
                Step::Absorbed => {
                    self.time = self.time.max(t);
                    return;
                }
                _ => {}
            }
        }
    }
}

/// Densities sampled on a fixed time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub densities: Vec<f64>,
    pub events: Vec<u64>,
    pub terminal: Configuration,
    pub absorbed_at: Option<f64>,
}

impl Trajectory {
    pub fn final_density(&self) -> f64 {
        *self.densities.last().unwrap()
    }

    pub fn total_events(&self) -> u64 {
        *self.events.last().unwrap()
    }

    /// CSV with columns `time,density,events`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("time,density,events\n");
        for i in 0..self.times.len() {
            let _ = writeln!(
                s,
                "{},{},{}",
                fmt_f64(self.times[i]),
                fmt_f64(self.densities[i]),
                self.events[i]
            );
        }
        s
    }
}

/// Float formatting used by every CSV writer: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Sample times `0, dt, 2dt, ...` up to `t_max`, with `t_max` appended if off-grid.
pub fn sample_grid(t_max: f64, sample_dt: f64) -> Vec<f64> {
    let steps = (t_max / sample_dt).floor() as usize;
    let mut grid: Vec<f64> = (0..=steps).map(|i| i as f64 * sample_dt).collect();
    grid.retain(|&t| t <= t_max);
    if *grid.last().unwrap() < t_max {
        grid.push(t_max);
    }
    grid
}

fn check_horizon(t_max: f64, sample_dt: f64) -> Result<(), DynamicsError> {
    if !(t_max.is_finite() && t_max > 0.0) {
        return Err(DynamicsError::NonPositiveHorizon(t_max));
    }
    if !(sample_dt.is_finite() && sample_dt > 0.0) {
        return Err(DynamicsError::InvalidParameter(format!(
            "sample_dt must be positive, got {sample_dt}"
        )));
    }
    Ok(())
}

/// Simulate from `config` up to `t_max`, recording the density every `sample_dt`.
pub fn run<R: Rng + ?Sized>(
    config: &Configuration,
    params: &QVoterParams,
    t_max: f64,
    rng: &mut R,
    sample_dt: f64,
) -> Result<Trajectory, DynamicsError> {
    check_horizon(t_max, sample_dt)?;
    let mut sim = Simulator::new(config, params)?;
    let grid = sample_grid(t_max, sample_dt);
    let mut densities = Vec::with_capacity(grid.len());
    let mut events = Vec::with_capacity(grid.len());
    for &t in &grid {
        sim.advance_to(t, rng);
        densities.push(sim.density());
        events.push(sim.events());
    }
    Ok(Trajectory {
        times: grid,
        densities,
        events,
        terminal: sim.configuration(),
        absorbed_at: sim.absorbed_at(),
    })
}

/// Result of [`run_windowed_voter`].
#[derive(Debug, Clone)]
pub struct WindowedRun {
    pub perturbed: Trajectory,
    pub windowed: Trajectory,
    /// Number of sites where the two copies differ at `t_max`.
    pub discrepancy: usize,
}

/// Two copies driven by one event stream. The second copy uses pure voter
/// rates during `[t1, t2)` and the model rates elsewhere.
///
/// Proposals arrive at every site at rate `r_cap` and share one uniform
/// mark, so the copies only separate where the two rates differ.
pub fn run_windowed_voter<R: Rng + ?Sized>(
    config: &Configuration,
    params: &QVoterParams,
    t_max: f64,
    window: (f64, f64),
    rng: &mut R,
    sample_dt: f64,
) -> Result<WindowedRun, DynamicsError> {
    check_horizon(t_max, sample_dt)?;
    let (t1, t2) = window;
    if !(0.0 <= t1 && t1 <= t2 && t2 <= t_max) {
        return Err(DynamicsError::BadWindow(t1, t2));
    }
    let lattice = config.lattice().clone();
    let k = lattice.k();
    let n = lattice.n();
    let model = params.rates_by_count(k)?;
    let voter = QVoterParams::voter().rates_by_count(k)?;
    let r_cap = model.iter().chain(&voter).cloned().fold(0.0, f64::max);

    let mut a = config.clone();
    let mut b = config.clone();
    let grid = sample_grid(t_max, sample_dt);
    let mut tr_a = (Vec::new(), Vec::new());
    let mut tr_b = (Vec::new(), Vec::new());
    let (mut ev_a, mut ev_b) = (0u64, 0u64);
    let mut t = 0.0;
    let total = n as f64 * r_cap;
    let mut next = 0;
    loop {
        let e: f64 = Exp1.sample(rng);
        let t_new = t + e / total;
        while next < grid.len() && grid[next] < t_new {
            tr_a.0.push(a.density());
            tr_a.1.push(ev_a);
            tr_b.0.push(b.density());
            tr_b.1.push(ev_b);
            next += 1;
        }
        if t_new > t_max {
            break;
        }
        t = t_new;
        let x = rng.gen_range(0..n);
        let mark: f64 = rng.gen::<f64>() * r_cap;
        let in_window = t >= t1 && t < t2;
        if mark < model[a.discordant_count(x)] {
            a.flip(x);
            ev_a += 1;
        }
        let rates_b = if in_window { &voter } else { &model };
        if mark < rates_b[b.discordant_count(x)] {
            b.flip(x);
            ev_b += 1;
        }
    }
    let discrepancy = a.hamming(&b);
    Ok(WindowedRun {
        perturbed: Trajectory {
            times: grid.clone(),
            densities: tr_a.0,
            events: tr_a.1,
            absorbed_at: None,
            terminal: a,
        },
        windowed: Trajectory {
            times: grid,
            densities: tr_b.0,
            events: tr_b.1,
            absorbed_at: None,
            terminal: b,
        },
        discrepancy,
    })
}
