//! Hitting times of a symmetric birth-death chain on `0..=z` with holding
//! rates `r(y)`, and the voter ones-count viewed as such a chain.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{fmt_f64, DynamicsError, QVoterParams, Simulator, Step};
use crate::lattice::Configuration;
use crate::rng::replica_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GreensError {
    #[error("need 0 < x < z, got x = {x}, z = {z}")]
    BadStart { x: u64, z: u64 },
    #[error("rate must be positive and finite at y = {y}, got {rate}")]
    BadRate { y: u64, rate: f64 },
    #[error("rate table has {got} entries but z = {z}")]
    ShortTable { z: u64, got: usize },
    #[error("unknown rate function {0:?}")]
    BadSpec(String),
    #[error("need at least one replicate")]
    NoReplicates,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Jump rate `r(y)` of the chain at position `y >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub enum RateFunction {
    Constant(f64),
    /// `r(y) = y`.
    Linear,
    /// `r(y) = y^p`.
    Power(f64),
    /// `r(y) = table[y - 1]`.
    Table(Vec<f64>),
}

impl RateFunction {
    pub fn rate(&self, y: u64) -> f64 {
        match self {
            RateFunction::Constant(c) => *c,
            RateFunction::Linear => y as f64,
            RateFunction::Power(p) => (y as f64).powf(*p),
            RateFunction::Table(t) => t.get(y as usize - 1).copied().unwrap_or(f64::NAN),
        }
    }

    /// `r` must be positive on `1..z`; `r(z)` only enters with weight zero.
    pub fn validate(&self, z: u64) -> Result<(), GreensError> {
        if let RateFunction::Table(t) = self {
            if (t.len() as u64) < z.saturating_sub(1) {
                return Err(GreensError::ShortTable { z, got: t.len() });
            }
        }
        for y in 1..z {
            let rate = self.rate(y);
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(GreensError::BadRate { y, rate });
            }
        }
        Ok(())
    }
}

impl FromStr for RateFunction {
    type Err = GreensError;

    /// `linear`, `constant[:c]`, `power:p`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GreensError::BadSpec(s.to_string());
        let (name, arg) = match s.split_once(':') {
            Some((a, b)) => (a, Some(b)),
            None => (s, None),
        };
        let num = |a: Option<&str>| a.ok_or_else(bad)?.trim().parse::<f64>().map_err(|_| bad());
        match name.trim() {
            "linear" => Ok(RateFunction::Linear),
            "constant" => Ok(RateFunction::Constant(arg.map_or(Ok(1.0), |a| num(Some(a)))?)),
            "power" => Ok(RateFunction::Power(num(arg)?)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for RateFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RateFunction::Constant(c) => write!(f, "constant:{c}"),
            RateFunction::Linear => write!(f, "linear"),
            RateFunction::Power(p) => write!(f, "power:{p}"),
            RateFunction::Table(t) => write!(f, "table[{}]", t.len()),
        }
    }
}

fn check(x: u64, z: u64, r: &RateFunction) -> Result<(), GreensError> {
    if x == 0 || x >= z {
        return Err(GreensError::BadStart { x, z });
    }
    r.validate(z)
}

/// Expected visits of the discrete-time walk to `y` before leaving `(0, z)`:
/// `2x(z-y)/z` for `x <= y`, `2(z-x)y/z` for `x >= y`.
pub fn visit_count(x: u64, y: u64, z: u64) -> f64 {
    let (x, y, z) = (x as f64, y as f64, z as f64);
    if x <= y {
        2.0 * x * (z - y) / z
    } else {
        2.0 * (z - x) * y / z
    }
}

/// Expected time spent at `y` before absorption, starting from `x`.
pub fn green_function(x: u64, y: u64, z: u64, r: &RateFunction) -> Result<f64, GreensError> {
    check(x, z, r)?;
    if y == 0 || y >= z {
        return Ok(0.0);
    }
    Ok(visit_count(x, y, z) / r.rate(y))
}

/// `E_x T = sum_{y<=x} 2y/r(y) + sum_{x<y<=z} 2x/r(y) - sum_{y<=z} 2xy/(z r(y))`.
pub fn expected_hitting_time(x: u64, z: u64, r: &RateFunction) -> Result<f64, GreensError> {
    check(x, z, r)?;
    let (xf, zf) = (x as f64, z as f64);
    // the y = z terms cancel between the last two sums
    let rate = |y: u64| if y == z { 1.0 } else { r.rate(y) };
    let first: f64 = (1..=x).map(|y| 2.0 * y as f64 / rate(y)).sum();
    let second: f64 = (x + 1..=z).map(|y| 2.0 * xf / rate(y)).sum();
    let third: f64 = (1..=z).map(|y| 2.0 * xf * y as f64 / (zf * rate(y))).sum();
    Ok(first + second - third)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HittingEstimate {
    pub mean_time: f64,
    pub time_se: f64,
    /// Fraction of runs that reached `z` before `0`.
    pub top_fraction: f64,
    pub top_se: f64,
    pub replicates: u64,
}

/// Simulate the chain: from `j` wait `Exp(r(j))`, then step to `j +- 1`
/// with equal probability, until hitting `0` or `z`.
pub fn simulate_hitting(x: u64, z: u64, r: &RateFunction, replicates: u64, seed: u64) -> Result<HittingEstimate, GreensError> {
    check(x, z, r)?;
    if replicates == 0 {
        return Err(GreensError::NoReplicates);
    }
    const CHUNK: u64 = 1024;
    let rates: Vec<f64> = (0..=z).map(|y| if y == 0 || y == z { 0.0 } else { r.rate(y) }).collect();
    let parts: Vec<(f64, f64, u64)> = (0..replicates.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = replica_rng(seed, c);
            let count = CHUNK.min(replicates - c * CHUNK);
            let (mut s, mut s2, mut top) = (0.0, 0.0, 0);
            for _ in 0..count {
                let mut j = x;
                let mut t = 0.0;
                while j != 0 && j != z {
                    let e: f64 = Exp1.sample(&mut rng);
                    t += e / rates[j as usize];
                    if rng.gen::<bool>() {
                        j += 1;
                    } else {
                        j -= 1;
                    }
                }
                s += t;
                s2 += t * t;
                top += (j == z) as u64;
            }
            (s, s2, top)
        })
        .collect();
    let (s, s2, top) = parts
        .into_iter()
        .fold((0.0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let n = replicates as f64;
    let mean = s / n;
    let var = if replicates > 1 {
        (s2 - n * mean * mean) / (n - 1.0)
    } else {
        0.0
    };
    let p = top as f64 / n;
    Ok(HittingEstimate {
        mean_time: mean,
        time_se: (var.max(0.0) / n).sqrt(),
        top_fraction: p,
        top_se: (p * (1.0 - p) / n).sqrt(),
        replicates,
    })
}

/// Time-weighted mean total flip rate at each ones-count of a voter run,
/// plus the signs of the ones-count increments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RateProfile {
    /// `j -> (time spent, integral of total rate)`.
    pub bins: BTreeMap<usize, (f64, f64)>,
    pub ups: u64,
    pub downs: u64,
}

impl RateProfile {
    /// `(j, mean rate, time spent)` for every visited `j`.
    pub fn profile(&self) -> Vec<(usize, f64, f64)> {
        self.bins
            .iter()
            .filter(|(_, (t, _))| *t > 0.0)
            .map(|(j, (t, a))| (*j, a / t, *t))
            .collect()
    }

    /// CSV with columns `ones,mean_rate,time`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("ones,mean_rate,time\n");
        for (j, r, t) in self.profile() {
            let _ = writeln!(s, "{},{},{}", j, fmt_f64(r), fmt_f64(t));
        }
        s
    }
}

/// Total voter flip rate of `config`: every discordant ordered pair
/// contributes `1/k`, so for symmetric neighborhoods this is `2|boundary|/k`.
pub fn voter_total_rate(config: &Configuration) -> f64 {
    let l = config.lattice();
    let pairs: usize = (0..l.n()).map(|x| config.discordant_count(x)).sum();
    pairs as f64 / l.k() as f64
}

/// Run the linear voter model from `config` up to `t_max` and bin the total
/// flip rate by ones-count.
pub fn voter_rate_profile<R: Rng + ?Sized>(
    config: &Configuration,
    t_max: f64,
    rng: &mut R,
) -> Result<RateProfile, GreensError> {
    if !(t_max > 0.0) {
        return Err(GreensError::EmptyTrajectory);
    }
    let mut sim = Simulator::new(config, &QVoterParams::voter())?;
    let mut out = RateProfile::default();
    loop {
        let (t0, j, rate) = (sim.time(), sim.ones_count(), sim.total_rate());
        let step = sim.step(rng, t_max);
        let dt = match step {
            Step::Absorbed => t_max - t0,
            _ => sim.time() - t0,
        };
        let bin = out.bins.entry(j).or_insert((0.0, 0.0));
        bin.0 += dt;
        bin.1 += dt * rate;
        match step {
            Step::Flip { .. } => {
                if sim.ones_count() > j {
                    out.ups += 1;
                } else {
                    out.downs += 1;
                }
            }
            Step::Null => {}
            Step::Limit | Step::Absorbed => break,
        }
    }
    Ok(out)
}
