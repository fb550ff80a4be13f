//! Box sums, boundary sizes, extinction ensembles and tail bounds.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{fmt_f64, product_measure, DynamicsError, QVoterParams, Simulator};
use crate::equilibrium::{sample_nu_u_dual, EquilibriumError};
use crate::lattice::{Configuration, Offset, TorusLattice};
use crate::rng::replica_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("box side {r} does not divide L = {side}")]
    BoxDoesNotDivide { r: usize, side: usize },
    #[error("reference density must lie strictly between 0 and 1, got {0}")]
    BadDensity(f64),
    #[error("need at least 3 distinct box sizes, got {0}")]
    TooFewSizes(usize),
    #[error("box sums at r = {0} have zero variance")]
    ZeroVariance(usize),
    #[error("boundary needs a symmetric neighborhood")]
    AsymmetricNeighborhood,
    #[error("poisson mean must be positive, got {0}")]
    BadMean(f64),
    #[error("need at least one sample")]
    Empty,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
}

/// Sums over the disjoint `r`-cubes anchored at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSumSample {
    pub r: usize,
    pub lambda: f64,
    /// `sum_{x in cube} (xi(x) - lambda)`.
    pub raw: Vec<f64>,
    /// `[lambda (1-lambda)]^(-1/2) r^(-5/2)` times `raw`.
    pub values: Vec<f64>,
}

impl BoxSumSample {
    /// CSV with columns `r,cube_index,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("r,cube_index,value\n");
        self.append_rows(&mut s);
        s
    }

    pub fn append_rows(&self, s: &mut String) {
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", self.r, i, fmt_f64(*v));
        }
    }
}

/// Cube `(cx, cy, cz)` has index `cx + m cy + m^2 cz`, `m = L / r`.
pub fn box_sums(config: &Configuration, r: usize, lambda: f64) -> Result<BoxSumSample, StatsError> {
    let side = config.lattice().side();
    if r == 0 || !side.is_multiple_of(r) {
        return Err(StatsError::BoxDoesNotDivide { r, side });
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(StatsError::BadDensity(lambda));
    }
    let m = side / r;
    let lattice = config.lattice();
    let mut counts = vec![0usize; m * m * m];
    for x in 0..lattice.n() {
        if config.get(x) {
            let [a, b, c] = lattice.coords(x);
            counts[a / r + m * (b / r) + m * m * (c / r)] += 1;
        }
    }
    let vol = (r * r * r) as f64;
    let norm = 1.0 / ((lambda * (1.0 - lambda)).sqrt() * (r as f64).powf(2.5));
    let raw: Vec<f64> = counts.iter().map(|&c| c as f64 - lambda * vol).collect();
    let values = raw.iter().map(|v| v * norm).collect();
    Ok(BoxSumSample { r, lambda, raw, values })
}

/// Least-squares fit of `log Var(raw box sum)` against `log r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    /// `(r, variance)` points entering the fit.
    pub points: Vec<(usize, f64)>,
}

impl ExponentFit {
    /// `slope +- z * se`.
    pub fn band(&self, z: f64) -> (f64, f64) {
        (self.slope - z * self.slope_se, self.slope + z * self.slope_se)
    }
}

/// Pool samples by `r`, take the sample variance of the raw sums, and fit.
pub fn variance_exponent(samples: &[BoxSumSample]) -> Result<ExponentFit, StatsError> {
    let mut rs: Vec<usize> = samples.iter().map(|s| s.r).collect();
    rs.sort_unstable();
    rs.dedup();
    if rs.len() < 3 {
        return Err(StatsError::TooFewSizes(rs.len()));
    }
    let mut points = Vec::new();
    for &r in &rs {
        let all: Vec<f64> = samples
            .iter()
            .filter(|s| s.r == r)
            .flat_map(|s| s.raw.iter().copied())
            .collect();
        let var = sample_variance(&all);
        if !(var > 0.0) {
            return Err(StatsError::ZeroVariance(r));
        }
        points.push((r, var));
    }
    let xs: Vec<f64> = points.iter().map(|(r, _)| (*r as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| v.ln()).collect();
    let (slope, intercept, slope_se) = least_squares(&xs, &ys);
    Ok(ExponentFit {
        slope,
        intercept,
        slope_se,
        points,
    })
}

fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Slope, intercept and slope standard error.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let se = if xs.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    (slope, intercept, se)
}

/// Centered fourth moment over squared variance; 3 for a normal law.
pub fn moment_ratio(values: &[f64]) -> Result<f64, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    if m2 == 0.0 {
        return Err(StatsError::ZeroVariance(0));
    }
    Ok(m4 / (m2 * m2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryStats {
    /// Number of unordered discordant neighbor pairs.
    pub size: usize,
    pub ones: usize,
    /// `size / ones`, infinite when there are no ones and some boundary.
    pub ratio: f64,
}

impl BoundaryStats {
    /// `min(|xi|, n-|xi|)^(1/3) <= |boundary| <= k min(|xi|, n-|xi|)`,
    /// the lower bound only for non-constant configurations.
    pub fn bounds_hold(&self, n: usize, k: usize) -> bool {
        let minority = self.ones.min(n - self.ones);
        let upper = self.size <= k * minority;
        let lower = minority == 0 || self.size as f64 >= (minority as f64).cbrt();
        upper && lower
    }
}

pub fn boundary_stats(config: &Configuration) -> Result<BoundaryStats, StatsError> {
    let lattice = config.lattice();
    if !lattice.is_symmetric() {
        return Err(StatsError::AsymmetricNeighborhood);
    }
    let mut twice = 0usize;
    for x in 0..lattice.n() {
        twice += config.discordant_count(x);
    }
    let size = twice / 2;
    let ones = config.ones_count();
    let ratio = if ones == 0 {
        if size == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        size as f64 / ones as f64
    };
    Ok(BoundaryStats { size, ones, ratio })
}

/// Mean and standard error of `|boundary| / |xi|` over `samples`
/// equilibrium draws at low density `u`.
pub fn boundary_ratio_plateau(
    lattice: Arc<TorusLattice>,
    u: f64,
    burn_time: f64,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64), StatsError> {
    if samples < 2 {
        return Err(StatsError::Empty);
    }
    let ratios: Result<Vec<f64>, StatsError> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(seed, i as u64);
            let c = sample_nu_u_dual(lattice.clone(), u, burn_time, &mut rng)?;
            Ok(boundary_stats(&c)?.ratio)
        })
        .collect();
    let ratios = ratios?;
    let finite: Vec<f64> = ratios.into_iter().filter(|r| r.is_finite()).collect();
    if finite.len() < 2 {
        return Err(StatsError::Empty);
    }
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    Ok((mean, (sample_variance(&finite) / finite.len() as f64).sqrt()))
}

/// Probability that walkers started at the origin and at `start` have not
/// met by time `horizon`, on `Z^3` with jumps uniform over `offsets`.
/// Returns the estimate and its standard error.
pub fn non_coalescence_probability(
    offsets: &[Offset],
    start: Offset,
    horizon: f64,
    replicates: u64,
    seed: u64,
) -> Result<(f64, f64), StatsError> {
    if replicates == 0 {
        return Err(StatsError::Empty);
    }
    const CHUNK: u64 = 4096;
    let chunks = replicates.div_ceil(CHUNK);
    let k = offsets.len();
    let survived: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = replica_rng(seed, c);
            let count = CHUNK.min(replicates - c * CHUNK);
            let mut alive = 0;
            for _ in 0..count {
                // the difference walk jumps at rate 2, by +o or -o
                let jumps = Poisson::new(2.0 * horizon).map(|d| d.sample(&mut rng) as u64).unwrap_or(0);
                let mut d = [start[0] as i64, start[1] as i64, start[2] as i64];
                let mut met = false;
                for _ in 0..jumps {
                    let o = offsets[rng.gen_range(0..k)];
                    let s = if rng.gen::<bool>() { 1 } else { -1 };
                    for i in 0..3 {
                        d[i] += s * o[i] as i64;
                    }
                    if d == [0, 0, 0] {
                        met = true;
                        break;
                    }
                }
                alive += (!met) as u64;
            }
            alive
        })
        .sum();
    let p = survived as f64 / replicates as f64;
    Ok((p, (p * (1.0 - p) / replicates as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    AllZero,
    AllOne,
    Censored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtinctionSample {
    /// Absorption time, or `t_max` when censored.
    pub time: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtinctionEnsemble {
    pub t_max: f64,
    pub samples: Vec<ExtinctionSample>,
}

impl ExtinctionEnsemble {
    pub fn count(&self, outcome: Outcome) -> usize {
        self.samples.iter().filter(|s| s.outcome == outcome).count()
    }

    pub fn censoring_rate(&self) -> f64 {
        self.count(Outcome::Censored) as f64 / self.samples.len() as f64
    }

    /// CSV with columns `replicate,time,censored,state`; `state` is the
    /// absorbing opinion, empty when censored.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("replicate,time,censored,state\n");
        for (i, e) in self.samples.iter().enumerate() {
            let (c, st) = match e.outcome {
                Outcome::AllZero => (0, "0"),
                Outcome::AllOne => (0, "1"),
                Outcome::Censored => (1, ""),
            };
            let _ = writeln!(s, "{},{},{},{}", i, fmt_f64(e.time), c, st);
        }
        s
    }
}

/// Absorption times from product measure at `u0`, censored at `t_max`.
pub fn extinction_ensemble(
    lattice: Arc<TorusLattice>,
    params: &QVoterParams,
    u0: f64,
    replicates: usize,
    t_max: f64,
    seed: u64,
) -> Result<ExtinctionEnsemble, StatsError> {
    if replicates == 0 {
        return Err(StatsError::Empty);
    }
    if !(t_max > 0.0) {
        return Err(DynamicsError::NonPositiveHorizon(t_max).into());
    }
    let samples: Result<Vec<ExtinctionSample>, StatsError> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(seed, i as u64);
            let start = product_measure(lattice.clone(), u0, &mut rng)?;
            let mut sim = Simulator::new(&start, params)?;
            let already = sim.is_absorbed();
            sim.advance_to(t_max, &mut rng);
            Ok(if sim.is_absorbed() {
                let time = if already { 0.0 } else { sim.absorbed_at().unwrap_or(0.0) };
                let outcome = if sim.ones_count() == 0 {
                    Outcome::AllZero
                } else {
                    Outcome::AllOne
                };
                ExtinctionSample { time, outcome }
            } else {
                ExtinctionSample {
                    time: t_max,
                    outcome: Outcome::Censored,
                }
            })
        })
        .collect();
    Ok(ExtinctionEnsemble {
        t_max,
        samples: samples?,
    })
}

/// `exp(-(2 ln 2 - 1) lambda)`, a bound on `P(Poisson(lambda) >= 2 lambda)`.
pub fn poisson_tail(lambda: f64) -> Result<f64, StatsError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(StatsError::BadMean(lambda));
    }
    Ok((-(2.0 * 2f64.ln() - 1.0) * lambda).exp())
}

/// Empirical `P(Z >= 2 lambda)` over `draws` Poisson samples, with its
/// standard error.
pub fn poisson_tail_empirical(lambda: f64, draws: u64, seed: u64) -> Result<(f64, f64), StatsError> {
    poisson_tail(lambda)?;
    if draws == 0 {
        return Err(StatsError::Empty);
    }
    const CHUNK: u64 = 1 << 16;
    let dist = Poisson::new(lambda).map_err(|_| StatsError::BadMean(lambda))?;
    let hits: u64 = (0..draws.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = replica_rng(seed, c);
            let count = CHUNK.min(draws - c * CHUNK);
            (0..count).filter(|_| dist.sample(&mut rng) >= 2.0 * lambda).count() as u64
        })
        .sum();
    let p = hits as f64 / draws as f64;
    Ok((p, (p * (1.0 - p) / draws as f64).sqrt()))
}
