//! Approximate samples from the voter equilibrium `nu_u`, coalescence fates
//! of the origin and its neighbors, and the local statistics `rho_m^i(u)`.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp1, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{fmt_f64, product_measure, DynamicsError, QVoterParams, Simulator};
use crate::lattice::{Configuration, Offset, TorusLattice};
use crate::poly::{Poly, Scalar};
use crate::rng::{replica_rng, SimRng};
use crate::unionfind::DisjointSets;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("density must lie strictly between 0 and 1, got {0}")]
    DegenerateDensity(f64),
    #[error("burn-in time must be nonnegative, got {0}")]
    BadBurnTime(f64),
    #[error("truncation time must be in [0, 1e5], got {0}")]
    BadTruncation(f64),
    #[error("need at least one replicate")]
    NoReplicates,
    #[error("neighborhood size {0} is unsupported (need 1..=12)")]
    BadNeighborhood(usize),
    #[error("fate probabilities sum to {0}, not 1")]
    Unnormalized(f64),
    #[error("malformed fate signature {0:?}")]
    BadSignature(String),
    #[error("malformed fate table: {0}")]
    BadTable(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Run the linear voter model from product measure with density `u` for
/// `burn_time` and return the terminal configuration.
pub fn sample_nu_u<R: Rng + ?Sized>(
    lattice: Arc<TorusLattice>,
    u: f64,
    burn_time: f64,
    rng: &mut R,
) -> Result<Configuration, EquilibriumError> {
    check_density(u, burn_time)?;
    let start = product_measure(lattice, u, rng)?;
    if burn_time == 0.0 {
        return Ok(start);
    }
    let mut sim = Simulator::new(&start, &QVoterParams::voter())?;
    sim.advance_to(burn_time, rng);
    Ok(sim.configuration())
}

/// Same law as [`sample_nu_u`], computed through the dual: coalescing
/// walks started from every site are run for `burn_time`, and each surviving
/// cluster receives an independent Bernoulli(`u`) opinion.
///
/// Far cheaper for long burn-ins on large tori, since the walker count
/// decays while the forward model keeps flipping at a constant rate.
pub fn sample_nu_u_dual<R: Rng + ?Sized>(
    lattice: Arc<TorusLattice>,
    u: f64,
    burn_time: f64,
    rng: &mut R,
) -> Result<Configuration, EquilibriumError> {
    check_density(u, burn_time)?;
    let clusters = coalesce_all_sites(&lattice, burn_time, rng);
    let n = lattice.n();
    let mut labels = clusters;
    let mut opinion = vec![2u8; n];
    let mut out = Configuration::zeros(lattice);
    for x in 0..n {
        let r = labels.find(x);
        if opinion[r] == 2 {
            opinion[r] = (rng.gen::<f64>() < u) as u8;
        }
        if opinion[r] == 1 {
            out.set(x, true);
        }
    }
    Ok(out)
}

/// Coalescing random walks from every site of the torus for time `t`;
/// returns the partition of starting sites.
pub fn coalesce_all_sites<R: Rng + ?Sized>(lattice: &TorusLattice, t: f64, rng: &mut R) -> DisjointSets {
    const EMPTY: u32 = u32::MAX;
    let n = lattice.n();
    let k = lattice.k();
    let mut sets = DisjointSets::new(n);
    let mut pos: Vec<u32> = (0..n as u32).collect();
    let mut occupant: Vec<u32> = (0..n as u32).collect();
    let mut alive: Vec<u32> = (0..n as u32).collect();
    let mut clock = 0.0;
    while alive.len() > 1 {
        let e: f64 = Exp1.sample(rng);
        clock += e / alive.len() as f64;
        if clock > t {
            break;
        }
        let i = rng.gen_range(0..alive.len());
        let w = alive[i] as usize;
        let from = pos[w] as usize;
        let to = lattice.step(from, rng.gen_range(0..k));
        occupant[from] = EMPTY;
        let other = occupant[to];
        if other == EMPTY {
            occupant[to] = w as u32;
            pos[w] = to as u32;
        } else {
            sets.union(other as usize, w);
            alive.swap_remove(i);
        }
    }
    sets
}

fn check_density(u: f64, burn_time: f64) -> Result<(), EquilibriumError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(EquilibriumError::DegenerateDensity(u));
    }
    if !(burn_time >= 0.0 && burn_time.is_finite()) {
        return Err(EquilibriumError::BadBurnTime(burn_time));
    }
    Ok(())
}

/// Coalescence fate `s0; s1, ..., sj` of the origin and its `k` neighbors:
/// `s0` neighbors end up with the origin, the rest form clusters of sizes
/// `s1 <= ... <= sj`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FateSignature {
    s0: u8,
    clusters: Vec<u8>,
}

impl FateSignature {
    pub fn new(s0: usize, mut clusters: Vec<usize>) -> Self {
        clusters.sort_unstable();
        Self {
            s0: s0 as u8,
            clusters: clusters.into_iter().map(|c| c as u8).collect(),
        }
    }

    pub fn s0(&self) -> usize {
        self.s0 as usize
    }

    pub fn clusters(&self) -> Vec<usize> {
        self.clusters.iter().map(|&c| c as usize).collect()
    }

    /// Number of clusters not containing the origin.
    pub fn j(&self) -> usize {
        self.clusters.len()
    }

    /// Neighborhood size, `s0 + sum(s_i)`.
    pub fn k(&self) -> usize {
        self.s0 as usize + self.clusters.iter().map(|&c| c as usize).sum::<usize>()
    }

    /// The all-distinct fate `0; 1, ..., 1`.
    pub fn discrete(k: usize) -> Self {
        Self::new(0, vec![1; k])
    }
}

impl fmt::Display for FateSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{};", self.s0)?;
        let parts: Vec<String> = self.clusters.iter().map(|c| c.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for FateSignature {
    type Err = EquilibriumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EquilibriumError::BadSignature(s.to_string());
        let (head, tail) = s.split_once(';').ok_or_else(bad)?;
        let s0: usize = head.trim().parse().map_err(|_| bad())?;
        let mut clusters = Vec::new();
        for part in tail.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let c: usize = part.parse().map_err(|_| bad())?;
            // "3;0" is accepted as another spelling of "3;"
            if c > 0 {
                clusters.push(c);
            }
        }
        Ok(Self::new(s0, clusters))
    }
}

/// Every fate signature for a neighborhood of size `k`.
pub fn enumerate_signatures(k: usize) -> Vec<FateSignature> {
    let mut out = Vec::new();
    for s0 in 0..=k {
        for part in partitions(k - s0, 1) {
            out.push(FateSignature::new(s0, part));
        }
    }
    out.sort();
    out
}

/// Partitions of `n` into parts `>= min`, each in nondecreasing order.
fn partitions(n: usize, min: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for first in min..=n {
        for mut rest in partitions(n - first, first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Empirical distribution of coalescence fates.
#[derive(Debug, Clone, PartialEq)]
pub struct FateDistribution {
    k: usize,
    counts: BTreeMap<FateSignature, u64>,
    samples: u64,
    t_trunc: f64,
}

impl FateDistribution {
    pub fn from_counts(k: usize, counts: BTreeMap<FateSignature, u64>, t_trunc: f64) -> Self {
        let samples = counts.values().sum();
        Self {
            k,
            counts,
            samples,
            t_trunc,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn t_trunc(&self) -> f64 {
        self.t_trunc
    }

    pub fn count(&self, sig: &FateSignature) -> u64 {
        self.counts.get(sig).copied().unwrap_or(0)
    }

    pub fn probability(&self, sig: &FateSignature) -> f64 {
        self.count(sig) as f64 / self.samples as f64
    }

    pub fn stderr(&self, sig: &FateSignature) -> f64 {
        let p = self.probability(sig);
        (p * (1.0 - p) / self.samples as f64).sqrt()
    }

    /// Observed signatures with their counts, in signature order.
    pub fn iter(&self) -> impl Iterator<Item = (&FateSignature, u64)> {
        self.counts.iter().map(|(s, &c)| (s, c))
    }

    /// Probabilities as `count / samples` in the requested field; exact for
    /// rationals.
    pub fn probabilities<T: Scalar>(&self) -> Vec<(FateSignature, T)> {
        self.counts
            .iter()
            .map(|(s, &c)| (s.clone(), T::from_ratio(c as i64, self.samples as i64)))
            .collect()
    }

    /// Largest `|p - p'| / sqrt(se^2 + se'^2)` over all signatures seen in
    /// either table, used to compare two truncation times.
    pub fn max_z_difference(&self, other: &FateDistribution) -> f64 {
        let mut sigs: Vec<&FateSignature> = self.counts.keys().chain(other.counts.keys()).collect();
        sigs.sort();
        sigs.dedup();
        sigs.into_iter()
            .map(|s| {
                let d = (self.probability(s) - other.probability(s)).abs();
                let se = (self.stderr(s).powi(2) + other.stderr(s).powi(2)).sqrt();
                if se > 0.0 {
                    d / se
                } else if d > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: &FateDistribution) {
        for (s, c) in &other.counts {
            *self.counts.entry(s.clone()).or_insert(0) += c;
        }
        self.samples += other.samples;
    }

    /// CSV with columns `signature,probability,stderr,count`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("signature,probability,stderr,count\n");
        for (sig, c) in &self.counts {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                sig,
                fmt_f64(self.probability(sig)),
                fmt_f64(self.stderr(sig)),
                c
            );
        }
        s
    }

    /// Parse [`to_csv`](Self::to_csv) output; counts are authoritative.
    pub fn from_csv(text: &str, t_trunc: f64) -> Result<Self, EquilibriumError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header.trim() != "signature,probability,stderr,count" {
            return Err(EquilibriumError::BadTable(format!("unexpected header {header:?}")));
        }
        let mut counts = BTreeMap::new();
        let mut k = None;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            // the signature itself contains commas
            if fields.len() < 4 {
                return Err(EquilibriumError::BadTable(line.to_string()));
            }
            let n = fields.len();
            let sig: FateSignature = fields[..n - 3].join(",").parse()?;
            let c: u64 = fields[n - 1]
                .trim()
                .parse()
                .map_err(|_| EquilibriumError::BadTable(line.to_string()))?;
            if *k.get_or_insert(sig.k()) != sig.k() {
                return Err(EquilibriumError::BadTable("mixed neighborhood sizes".into()));
            }
            counts.insert(sig, c);
        }
        let k = k.ok_or_else(|| EquilibriumError::BadTable("no rows".into()))?;
        Ok(Self::from_counts(k, counts, t_trunc))
    }
}

/// Pack a lattice point into one integer; exact while every coordinate stays
/// below `2^20` in absolute value.
#[inline]
fn pack(o: &Offset) -> i64 {
    o[0] as i64 + (o[1] as i64) * (1 << 21) + (o[2] as i64) * (1 << 42)
}

const MAX_WALKERS: usize = 13;

/// Uniform index below `n` from 32 random bits, by widening multiplication
/// with rejection; `zone` is `2^32 mod n`.
#[inline]
fn below<R: Rng + ?Sized>(n: u32, zone: u32, rng: &mut R) -> u32 {
    loop {
        let m = rng.next_u32() as u64 * n as u64;
        if (m as u32) >= zone {
            return (m >> 32) as u32;
        }
    }
}

/// One replicate: `k+1` coalescing rate-1 walks on `Z^3` from the origin and
/// `offsets`, each jumping by a uniform offset, run until `t_trunc`.
///
/// Within an epoch with `m` walkers the jump chain is independent of the jump
/// times, so the number of jumps before `t_trunc` is drawn up front as
/// `Poisson(m * remaining)`. When a coalescence interrupts the epoch at jump
/// `j` of `N`, its time is the `j`-th uniform order statistic, which is
/// `Beta(j, N - j + 1)` on the remaining interval.
pub fn simulate_fate<R: Rng + ?Sized>(offsets: &[Offset], t_trunc: f64, rng: &mut R) -> FateSignature {
    let k = offsets.len();
    assert!(k < MAX_WALKERS);
    let mut moves = [0i64; MAX_WALKERS * MAX_WALKERS];
    let mut owner = [0u8; MAX_WALKERS * MAX_WALKERS];
    // retired slots hold a value no walker can reach
    let mut pos = [i64::MIN; 16];
    pos[0] = 0;
    let mut label = [0usize; MAX_WALKERS];
    for (i, o) in offsets.iter().enumerate() {
        pos[i + 1] = pack(o);
        label[i + 1] = i + 1;
    }
    let mut sets = DisjointSets::new(k + 1);
    let mut m = k + 1;
    let mut t = 0.0;
    while m > 1 && t < t_trunc {
        let jumps = poisson(m as f64 * (t_trunc - t), rng);
        let choices = (m * k) as u32;
        let zone = choices.wrapping_neg() % choices;
        for c in 0..m * k {
            moves[c] = pack(&offsets[c % k]);
            owner[c] = (c / k) as u8;
        }
        let mut merged_at = None;
        for j in 1..=jumps {
            let c = below(choices, zone, rng) as usize;
            let w = owner[c] as usize;
            let p = pos[w] + moves[c];
            pos[w] = p;
            let hits = pos.iter().fold(0u32, |acc, &q| acc + (q == p) as u32);
            if hits > 1 {
                let o = (0..m).find(|&o| o != w && pos[o] == p).expect("colliding walker");
                sets.union(label[o], label[w]);
                m -= 1;
                pos[w] = pos[m];
                pos[m] = i64::MIN;
                label[w] = label[m];
                merged_at = Some(j);
                break;
            }
        }
        match merged_at {
            Some(j) => t += (t_trunc - t) * order_statistic(j, jumps, rng),
            None => break,
        }
    }
    classify(&mut sets, k)
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Position of the `j`-th of `n` uniform points on the unit interval.
fn order_statistic<R: Rng + ?Sized>(j: u64, n: u64, rng: &mut R) -> f64 {
    Beta::new(j as f64, (n - j + 1) as f64)
        .map(|b| b.sample(rng))
        .unwrap_or(1.0)
}

fn classify(sets: &mut DisjointSets, k: usize) -> FateSignature {
    let origin = sets.find(0);
    let origin_size = sets.block_size(0);
    let mut clusters = Vec::new();
    let mut seen = Vec::new();
    for x in 1..=k {
        let r = sets.find(x);
        if r == origin || seen.contains(&r) {
            continue;
        }
        seen.push(r);
        clusters.push(sets.block_size(x));
    }
    FateSignature::new(origin_size - 1, clusters)
}

const FATE_CHUNK: u64 = 4096;

/// Estimate the fate distribution from `replicates` independent runs.
/// Replicates are grouped in fixed chunks, each with its own stream, so the
/// result depends only on `seed`.
pub fn coalescence_fates(
    offsets: &[Offset],
    t_trunc: f64,
    replicates: u64,
    seed: u64,
) -> Result<FateDistribution, EquilibriumError> {
    let k = offsets.len();
    if k == 0 || k > 12 {
        return Err(EquilibriumError::BadNeighborhood(k));
    }
    if !(0.0..=1e5).contains(&t_trunc) {
        return Err(EquilibriumError::BadTruncation(t_trunc));
    }
    if replicates == 0 {
        return Err(EquilibriumError::NoReplicates);
    }
    Ok(chunked_fates(k, t_trunc, replicates, seed, |rng| simulate_fate(offsets, t_trunc, rng)))
}

/// Fates of site 0 and its neighbors under coalescing walks on the finite
/// torus itself, run for time `t`. On a torus the voter model at time `t`
/// started from product measure has exactly these fates as its dual, so the
/// flip-rate drift of such configurations equals `phi` built from them.
pub fn torus_fates(
    lattice: &TorusLattice,
    t: f64,
    replicates: u64,
    seed: u64,
) -> Result<FateDistribution, EquilibriumError> {
    let k = lattice.k();
    if k > 12 {
        return Err(EquilibriumError::BadNeighborhood(k));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(EquilibriumError::BadTruncation(t));
    }
    if replicates == 0 {
        return Err(EquilibriumError::NoReplicates);
    }
    let start: Vec<usize> = std::iter::once(0)
        .chain(lattice.neighbor_slice(0).iter().map(|&y| y as usize))
        .collect();
    let mut distinct = start.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != k + 1 {
        return Err(EquilibriumError::BadNeighborhood(k));
    }
    Ok(chunked_fates(k, t, replicates, seed, |rng| {
        let mut pos = start.clone();
        let mut label: Vec<usize> = (0..=k).collect();
        let mut sets = DisjointSets::new(k + 1);
        let mut clock = 0.0;
        while pos.len() > 1 {
            let e: f64 = Exp1.sample(rng);
            clock += e / pos.len() as f64;
            if clock > t {
                break;
            }
            let w = rng.gen_range(0..pos.len());
            let p = lattice.step(pos[w], rng.gen_range(0..k));
            pos[w] = p;
            if let Some(o) = (0..pos.len()).find(|&o| o != w && pos[o] == p) {
                sets.union(label[o], label[w]);
                pos.swap_remove(w);
                label.swap_remove(w);
            }
        }
        classify(&mut sets, k)
    }))
}

fn chunked_fates<F>(k: usize, t_trunc: f64, replicates: u64, seed: u64, one: F) -> FateDistribution
where
    F: Fn(&mut SimRng) -> FateSignature + Sync,
{
    let chunks = replicates.div_ceil(FATE_CHUNK);
    let parts: Vec<BTreeMap<FateSignature, u64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = replica_rng(seed, c);
            let count = FATE_CHUNK.min(replicates - c * FATE_CHUNK);
            let mut map = BTreeMap::new();
            for _ in 0..count {
                *map.entry(one(&mut rng)).or_insert(0) += 1;
            }
            map
        })
        .collect();
    let mut counts = BTreeMap::new();
    for part in parts {
        for (s, c) in part {
            *counts.entry(s).or_insert(0) += c;
        }
    }
    FateDistribution::from_counts(k, counts, t_trunc)
}

/// `rho_m^0` and `rho_m^1` for one discordance count `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoPair<T> {
    /// Probability the origin is 0 and exactly `m` neighbors are 1.
    pub rho0: Poly<T>,
    /// Probability the origin is 1 and exactly `m` neighbors are 0.
    pub rho1: Poly<T>,
}

/// Build `q_m(u)` by summing, over fates and over opinion assignments to
/// the clusters away from the origin, `u^(#1-clusters) (1-u)^(#0-clusters)`
/// for assignments with exactly `m` disagreeing neighbors. Then
/// `rho_m^0 = (1-u) q_m(u)` and `rho_m^1 = u q_m(1-u)`.
pub fn rho_polynomials<T: Scalar>(
    fates: &[(FateSignature, T)],
    k: usize,
) -> Result<BTreeMap<usize, RhoPair<T>>, EquilibriumError> {
    check_normalized(fates)?;
    let mut q: Vec<Poly<T>> = vec![Poly::zero(); k + 1];
    for (sig, p) in fates {
        if sig.k() != k {
            return Err(EquilibriumError::BadNeighborhood(sig.k()));
        }
        let sizes = sig.clusters();
        let j = sizes.len();
        for mask in 0u32..(1 << j) {
            let ones = mask.count_ones() as usize;
            let m: usize = (0..j).filter(|i| mask >> i & 1 == 1).map(|i| sizes[i]).sum();
            q[m] = q[m].clone() + Poly::basis_term(ones, j - ones).scale(p);
        }
    }
    Ok(q
        .into_iter()
        .enumerate()
        .map(|(m, qm)| {
            let rho0 = Poly::one_minus_u() * qm.clone();
            let rho1 = Poly::u() * qm.compose_one_minus();
            (m, RhoPair { rho0, rho1 })
        })
        .collect())
}

/// Fails unless the probabilities sum to one (exactly for exact fields).
pub fn check_normalized<T: Scalar>(fates: &[(FateSignature, T)]) -> Result<(), EquilibriumError> {
    let total = fates.iter().fold(T::zero(), |acc, (_, p)| acc + p.clone());
    let ok = if T::EXACT {
        total == T::one()
    } else {
        (total.to_f64() - 1.0).abs() < 1e-9
    };
    if !ok || fates.iter().any(|(_, p)| p.to_f64() < 0.0) {
        return Err(EquilibriumError::Unnormalized(total.to_f64()));
    }
    Ok(())
}
