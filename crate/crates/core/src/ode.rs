//! Limiting and mean-field ODEs for the density, and their comparison with
//! particle trajectories under the time change `t -> t / epsilon`.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{fmt_f64, product_measure, run, DynamicsError, QVoterParams};
use crate::lattice::TorusLattice;
use crate::poly::Poly;
use crate::rng::replica_rng;

/// Target sup-norm gap between successive step halvings.
pub const REFINE_TOL: f64 = 1e-9;
const MAX_HALVINGS: usize = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("initial value {0} is outside [0, 1]")]
    BadInitial(f64),
    #[error("step and horizon must be positive (dt = {dt}, T = {t})")]
    BadStep { dt: f64, t: f64 },
    #[error("step refinement did not reach tolerance {0:e}")]
    NoConvergence(f64),
    #[error("epsilon must lie in [0, 1), got {0}")]
    BadEpsilon(f64),
    #[error("need at least one replicate")]
    NoReplicates,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Right-hand side of `du/dt`.
#[derive(Debug, Clone, PartialEq)]
pub enum Rhs {
    /// `-u (1-u)^q + (1-u) u^q`.
    MeanField { q: f64 },
    /// A polynomial in `u`, typically a reaction term.
    Polynomial(Poly<f64>),
}

impl Rhs {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Rhs::MeanField { q } => {
                // stages may stray past the interval by rounding
                let a = u.clamp(0.0, 1.0);
                -u * (1.0 - a).powf(*q) + (1.0 - u) * a.powf(*q)
            }
            Rhs::Polynomial(p) => p.eval_f64(u),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Rhs::MeanField { q } => format!("mean-field q={q}"),
            Rhs::Polynomial(p) => format!("polynomial {p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub rhs: String,
    /// Internal step that met the refinement tolerance.
    pub step: f64,
}

impl OdeSolution {
    /// Linear interpolation on the output grid, clamped to its ends.
    pub fn value_at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&s| s <= t);
        if i == 0 {
            return self.values[0];
        }
        if i >= self.times.len() {
            return *self.values.last().unwrap();
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        self.values[i - 1] * (1.0 - w) + self.values[i] * w
    }

    /// CSV with columns `time,u`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("time,u\n");
        for (t, u) in self.times.iter().zip(&self.values) {
            let _ = writeln!(s, "{},{}", fmt_f64(*t), fmt_f64(*u));
        }
        s
    }
}

fn rk4_step(rhs: &Rhs, u: f64, h: f64) -> f64 {
    let k1 = rhs.eval(u);
    let k2 = rhs.eval(u + 0.5 * h * k1);
    let k3 = rhs.eval(u + 0.5 * h * k2);
    let k4 = rhs.eval(u + h * k3);
    u + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Classical RK4 with `substeps` equal steps per output interval `dt`.
pub fn rk4_fixed(rhs: &Rhs, u0: f64, t: f64, dt: f64, substeps: usize) -> Vec<f64> {
    let outputs = (t / dt).round() as usize;
    let h = dt / substeps as f64;
    let mut u = u0;
    let mut out = Vec::with_capacity(outputs + 1);
    out.push(u);
    for _ in 0..outputs {
        for _ in 0..substeps {
            u = rk4_step(rhs, u, h);
        }
        out.push(u);
    }
    out
}

/// Integrate on the grid `0, dt, ..., T` (T rounded to a multiple of `dt`),
/// halving the internal step until two successive solutions agree to
/// [`REFINE_TOL`].
pub fn integrate(rhs: &Rhs, u0: f64, t: f64, dt: f64) -> Result<OdeSolution, OdeError> {
    if !(0.0..=1.0).contains(&u0) {
        return Err(OdeError::BadInitial(u0));
    }
    if !(dt > 0.0 && t > 0.0 && dt.is_finite() && t.is_finite()) {
        return Err(OdeError::BadStep { dt, t });
    }
    let mut substeps = 1;
    let mut prev = rk4_fixed(rhs, u0, t, dt, substeps);
    for _ in 0..MAX_HALVINGS {
        substeps *= 2;
        let next = rk4_fixed(rhs, u0, t, dt, substeps);
        let gap = prev.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prev = next;
        if gap < REFINE_TOL {
            return Ok(OdeSolution {
                times: (0..prev.len()).map(|i| i as f64 * dt).collect(),
                values: prev,
                rhs: rhs.describe(),
                step: dt / substeps as f64,
            });
        }
    }
    Err(OdeError::NoConvergence(REFINE_TOL))
}

/// Particle time spanned by ODE time `t0` when perturbations have size
/// `epsilon`; `epsilon = 0` leaves time unscaled.
pub fn particle_horizon(t0: f64, epsilon: f64) -> f64 {
    if epsilon == 0.0 {
        t0
    } else {
        t0 / epsilon
    }
}

/// Per-replicate sup deviations between particle densities and the ODE.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub ode: OdeSolution,
    pub deviations: Vec<f64>,
}

impl Comparison {
    pub fn mean(&self) -> f64 {
        self.deviations.iter().sum::<f64>() / self.deviations.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.deviations.iter().cloned().fold(0.0, f64::max)
    }

    /// CSV with columns `replicate,sup_deviation`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("replicate,sup_deviation\n");
        for (i, d) in self.deviations.iter().enumerate() {
            let _ = writeln!(s, "{},{}", i, fmt_f64(*d));
        }
        s
    }
}

/// Run `replicates` particle systems from product measure at `u0` for
/// particle time `t0 / epsilon` and record `sup_s |U(s) - u(s)|` over the
/// ODE-time grid of spacing `dt`, where `u` solves `du/dt = phi(u)`.
///
/// With `epsilon = 0` the ODE is constant and `t0` is read as particle time.
#[allow(clippy::too_many_arguments)]
pub fn compare_particle_ode(
    lattice: Arc<TorusLattice>,
    params: &QVoterParams,
    phi: &Poly<f64>,
    u0: f64,
    t0: f64,
    epsilon: f64,
    dt: f64,
    replicates: usize,
    seed: u64,
) -> Result<Comparison, OdeError> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(OdeError::BadEpsilon(epsilon));
    }
    if replicates == 0 {
        return Err(OdeError::NoReplicates);
    }
    let rhs = if epsilon == 0.0 {
        Rhs::Polynomial(Poly::zero())
    } else {
        Rhs::Polynomial(phi.clone())
    };
    let ode = integrate(&rhs, u0, t0, dt)?;
    let scale = particle_horizon(1.0, epsilon);
    let horizon = (ode.times.len() - 1) as f64 * dt * scale;
    let deviations: Result<Vec<f64>, OdeError> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(seed, i as u64);
            let start = product_measure(lattice.clone(), u0, &mut rng)?;
            let traj = run(&start, params, horizon, &mut rng, dt * scale)?;
            Ok(traj
                .densities
                .iter()
                .zip(&ode.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max))
        })
        .collect();
    Ok(Comparison {
        ode,
        deviations: deviations?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reaction::{phi_from_fates, perturbation_rates, K3Fates, Regime};
    use proptest::prelude::*;

    fn linear() -> Rhs {
        Rhs::Polynomial(Poly::new(vec![1.0, -2.0]))
    }

    #[test]
    fn fixed_points_stay_put() {
        for q in [0.5, 1.5] {
            for u0 in [0.0, 0.5, 1.0] {
                let s = integrate(&Rhs::MeanField { q }, u0, 10.0, 0.1).unwrap();
                assert!(s.values.iter().all(|v| (v - u0).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn mean_field_q_below_one_rises_to_half() {
        let s = integrate(&Rhs::MeanField { q: 0.5 }, 0.2, 30.0, 0.1).unwrap();
        assert!(s.values.windows(2).all(|w| w[1] >= w[0]));
        assert!((s.values.last().unwrap() - 0.5).abs() < 1e-3);
        assert!(s.values.iter().all(|v| *v <= 0.5));
        let up = integrate(&Rhs::MeanField { q: 1.5 }, 0.45, 30.0, 0.1).unwrap();
        assert!(*up.values.last().unwrap() < 0.01);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let exact = |t: f64| 0.5 + (0.1 - 0.5) * (-2.0 * t).exp();
        let err = |sub| {
            let v = rk4_fixed(&linear(), 0.1, 2.0, 0.5, sub);
            (v.last().unwrap() - exact(2.0)).abs()
        };
        let ratio = err(8) / err(16);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
        let s = integrate(&linear(), 0.1, 2.0, 0.5).unwrap();
        assert!((s.values.last().unwrap() - exact(2.0)).abs() < 1e-9);
    }

    #[test]
    fn bad_inputs() {
        assert!(integrate(&linear(), 1.5, 1.0, 0.1).is_err());
        assert!(integrate(&linear(), 0.5, 1.0, 0.0).is_err());
        let lat = Arc::new(TorusLattice::nearest_neighbor(4).unwrap());
        let p = Poly::zero();
        let v = QVoterParams::voter();
        assert!(compare_particle_ode(lat.clone(), &v, &p, 0.5, 1.0, 1.0, 0.1, 1, 0).is_err());
        assert!(compare_particle_ode(lat, &v, &p, 0.5, 1.0, 0.1, 0.1, 0, 0).is_err());
    }

    #[test]
    fn interpolation_and_csv() {
        let s = integrate(&linear(), 0.1, 1.0, 0.5).unwrap();
        assert_eq!(s.value_at(0.0), 0.1);
        let mid = s.value_at(0.25);
        assert!(mid > s.values[0] && mid < s.values[1]);
        assert!(s.to_csv().starts_with("time,u\n"));
    }

    #[test]
    fn reaction_ode_heads_to_half_and_mirror_away() {
        let p = K3Fates {
            p_0_3: 0.1,
            p_1_2: 0.1,
            p_2_1: 0.1,
            p_3: 0.1,
            p_0_21: 0.2,
            p_1_11: 0.2,
            p_0_111: 0.2,
        };
        let lt = phi_from_fates(&p.to_fates(), &perturbation_rates(3, Regime::QLt1).unwrap()).unwrap();
        let gt = phi_from_fates(&p.to_fates(), &perturbation_rates(3, Regime::QGt1).unwrap()).unwrap();
        let a = integrate(&Rhs::Polynomial(lt.phi), 0.25, 60.0, 0.5).unwrap();
        let b = integrate(&Rhs::Polynomial(gt.phi), 0.45, 60.0, 0.5).unwrap();
        assert!(a.values.windows(2).all(|w| w[1] >= w[0]));
        assert!(b.values.windows(2).all(|w| w[1] <= w[0]));
        assert!(*a.values.last().unwrap() > 0.45);
    }

    #[test]
    fn pure_voter_comparison_is_constant_ode() {
        let lat = Arc::new(TorusLattice::nearest_neighbor(6).unwrap());
        let c = compare_particle_ode(lat, &QVoterParams::voter(), &Poly::zero(), 0.3, 2.0, 0.0, 0.5, 4, 9).unwrap();
        assert!(c.ode.values.iter().all(|v| *v == 0.3));
        assert_eq!(c.deviations.len(), 4);
        assert!(c.max() < 0.7);
        assert!(c.to_csv().lines().count() == 5);
    }

    proptest! {
        #[test]
        fn doubling_epsilon_halves_horizon(t0 in 0.1f64..10.0, e in 1e-4f64..0.4) {
            prop_assert!((particle_horizon(t0, 2.0 * e) * 2.0 - particle_horizon(t0, e)).abs() < 1e-9 * particle_horizon(t0, e));
        }

        #[test]
        fn trajectories_stay_in_interval(q in 0.2f64..2.0, u0 in 0.0f64..=1.0) {
            let s = integrate(&Rhs::MeanField { q }, u0, 5.0, 0.25).unwrap();
            prop_assert!(s.values.iter().all(|v| (-1e-9..=1.0 + 1e-9).contains(v)));
        }
    }
}
