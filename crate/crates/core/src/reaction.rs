//! The reaction term `phi(u)`: assembly from coalescence fates through the
//! `Delta_{a,b}` polynomials, and its factorization
//! `phi = sign * c_k * u(1-u)(1-2u) * f_k(u)`.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::dynamics::{fmt_f64, DynamicsError, RateTable};
use crate::lattice::Configuration;
use crate::equilibrium::{check_normalized, enumerate_signatures, EquilibriumError, FateDistribution, FateSignature};
use crate::poly::{Poly, Scalar};

/// Largest neighborhood for which fates are enumerated exactly.
pub const MAX_K: usize = 12;

/// Grid spacing for the positivity check on `f_k`.
pub const POSITIVITY_GRID: usize = 1000;

/// Relative remainder tolerance for float factorization.
pub const FLOAT_REMAINDER_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReactionError {
    #[error("neighborhood size {0} is outside 3..=12")]
    BadK(usize),
    #[error("fates are for k = {fates} but rates are for k = {rates}")]
    Mismatch { fates: usize, rates: usize },
    #[error("remainder after dividing by u(1-u)(1-2u) has relative size {0:e}")]
    Remainder(f64),
    #[error("cofactor vanishes at u = 0; the reaction term is degenerate")]
    Degenerate,
    #[error("cofactor is not 1 at u = 1 (got {0})")]
    EndpointMismatch(f64),
    #[error("cofactor is not positive at u = {u}: f_k = {value}")]
    NotPositive { u: f64, value: f64 },
    #[error("fate probability {0} is negative")]
    NegativeProbability(f64),
    #[error("unknown regime {0:?} (expected qlt1 or qgt1)")]
    BadRegime(String),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Which side of the voter model the perturbation comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// `q < 1`, positive rates.
    QLt1,
    /// `q > 1`, negated rates.
    QGt1,
}

impl Regime {
    pub fn sign(self) -> f64 {
        match self {
            Regime::QLt1 => 1.0,
            Regime::QGt1 => -1.0,
        }
    }

    pub fn for_q(q: f64) -> Option<Self> {
        if q < 1.0 {
            Some(Regime::QLt1)
        } else if q > 1.0 {
            Some(Regime::QGt1)
        } else {
            None
        }
    }
}

impl FromStr for Regime {
    type Err = ReactionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "qlt1" | "q<1" => Ok(Regime::QLt1),
            "qgt1" | "q>1" => Ok(Regime::QGt1),
            _ => Err(ReactionError::BadRegime(s.to_string())),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::QLt1 => "qlt1",
            Regime::QGt1 => "qgt1",
        })
    }
}

/// `r^k_i = (i/k) ln(k/i)`, negated for `q > 1`; both ends are zero.
pub fn perturbation_rates(k: usize, regime: Regime) -> Result<RateTable, ReactionError> {
    if !(3..=MAX_K).contains(&k) {
        return Err(ReactionError::BadK(k));
    }
    let mut values = vec![0.0; k + 1];
    for (i, v) in values.iter_mut().enumerate().take(k).skip(1) {
        let x = i as f64 / k as f64;
        *v = -x * x.ln();
    }
    let table = RateTable::new(values)?;
    Ok(match regime {
        Regime::QLt1 => table,
        Regime::QGt1 => table.negated(),
    })
}

/// `Delta_{a,b}(u) = u^a (1-u)^(b+1) - u^(b+1) (1-u)^a` with its factored
/// form `sign * u^p (1-u)^p * (1-2u) * sum_{j<n} u^j (1-u)^(n-1-j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta<T> {
    pub a: usize,
    pub b: usize,
    pub poly: Poly<T>,
    /// `+1`, `-1`, or `0` when `a = b + 1`.
    pub sign: i8,
    /// Power `p = min(a, b+1)` of `u(1-u)`.
    pub power: usize,
    /// Telescoped positive cofactor `sum_{j<n} u^j (1-u)^(n-1-j)`, `n = |b+1-a|`.
    pub cofactor: Poly<T>,
}

impl<T: Scalar> Delta<T> {
    /// Rebuild the polynomial from the factored form.
    pub fn expand(&self) -> Poly<T> {
        if self.sign == 0 {
            return Poly::zero();
        }
        let two = T::one() + T::one();
        let s = if self.sign > 0 { T::one() } else { -T::one() };
        Poly::basis_term(self.power, self.power) * Poly::new(vec![T::one(), -two]) * self.cofactor.scale(&s)
    }
}

pub fn delta_ab<T: Scalar>(a: usize, b: usize) -> Delta<T> {
    let poly = Poly::basis_term(a, b + 1) - Poly::basis_term(b + 1, a);
    let (sign, power, n) = match a.cmp(&(b + 1)) {
        std::cmp::Ordering::Equal => (0, a, 0),
        std::cmp::Ordering::Less => (1, a, b + 1 - a),
        std::cmp::Ordering::Greater => (-1, b + 1, a - b - 1),
    };
    let cofactor = (0..n).fold(Poly::zero(), |acc, j| acc + Poly::basis_term(j, n - 1 - j));
    Delta {
        a,
        b,
        poly,
        sign,
        power,
        cofactor,
    }
}

/// `phi = sign * c_k * u(1-u)(1-2u) * f_k(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionTerm<T> {
    pub k: usize,
    pub phi: Poly<T>,
    pub sign: i8,
    pub c_k: T,
    pub f_k: Poly<T>,
}

impl<T: Scalar> ReactionTerm<T> {
    /// Factor `phi` and check the cofactor.
    pub fn factor(k: usize, phi: Poly<T>) -> Result<Self, ReactionError> {
        let (quot, rem) = phi.div_rem(&Poly::cubic_root_factor());
        if !rem.is_zero() {
            let rel = rem.l1_norm() / phi.l1_norm();
            if T::EXACT || rel > FLOAT_REMAINDER_TOL {
                return Err(ReactionError::Remainder(rel));
            }
        }
        let f0 = quot.coeff(0);
        let degenerate = if T::EXACT {
            f0.is_zero()
        } else {
            f0.to_f64().abs() <= FLOAT_REMAINDER_TOL * phi.l1_norm()
        };
        if degenerate {
            return Err(ReactionError::Degenerate);
        }
        let sign: i8 = if f0 > T::zero() { 1 } else { -1 };
        let c_k = f0.abs_val();
        let f_k = quot.scale(&(T::one() / f0));
        let f1 = f_k.eval(&T::one());
        let ok = if T::EXACT {
            f1 == T::one()
        } else {
            (f1.to_f64() - 1.0).abs() < 1e-9
        };
        if !ok {
            return Err(ReactionError::EndpointMismatch(f1.to_f64()));
        }
        let fk = f_k.to_f64();
        for i in 0..=POSITIVITY_GRID {
            let u = i as f64 / POSITIVITY_GRID as f64;
            let v = fk.eval_f64(u);
            if v <= 0.0 {
                return Err(ReactionError::NotPositive { u, value: v });
            }
        }
        Ok(Self { k, phi, sign, c_k, f_k })
    }

    pub fn eval(&self, u: f64) -> f64 {
        self.phi.eval_f64(u)
    }

    pub fn to_f64(&self) -> ReactionTerm<f64> {
        ReactionTerm {
            k: self.k,
            phi: self.phi.to_f64(),
            sign: self.sign,
            c_k: self.c_k.to_f64(),
            f_k: self.f_k.to_f64(),
        }
    }

    /// CSV: a `sign,c_k` header row, then `degree,phi,f_k` coefficients.
    pub fn to_csv(&self) -> String {
        let mut s = format!("sign,c_k\n{},{}\ndegree,phi,f_k\n", self.sign, fmt_f64(self.c_k.to_f64()));
        let n = self.phi.coeffs().len().max(self.f_k.coeffs().len());
        for d in 0..n {
            let _ = writeln!(
                s,
                "{},{},{}",
                d,
                fmt_f64(self.phi.coeff(d).to_f64()),
                fmt_f64(self.f_k.coeff(d).to_f64())
            );
        }
        s
    }

    /// Human-readable factored form.
    pub fn factored_string(&self) -> String {
        let sign = if self.sign > 0 { "+" } else { "-" };
        format!(
            "{sign}{} * u(1-u)(1-2u) * [{}]",
            fmt_f64(self.c_k.to_f64()),
            self.f_k.to_f64()
        )
    }
}

/// For one fate with `j` clusters, the grouped weights
/// `w_a = sum over a-subsets S of clusters of r_{size(S)}`, `a = 0..=j`.
pub fn grouped_weights<T: Scalar>(sig: &FateSignature, rates: &[T]) -> Vec<T> {
    let sizes = sig.clusters();
    let j = sizes.len();
    let mut w = vec![T::zero(); j + 1];
    for mask in 0u32..(1 << j) {
        let a = mask.count_ones() as usize;
        let m: usize = (0..j).filter(|i| mask >> i & 1 == 1).map(|i| sizes[i]).sum();
        w[a] = w[a].clone() + rates[m].clone();
    }
    w
}

/// `phi = sum_m r_m (rho_m^0 - rho_m^1)`, assembled signature by signature as
/// `p * sum_a w_a * Delta_{a, j-a}`.
pub fn phi_polynomial<T: Scalar>(fates: &[(FateSignature, T)], rates: &RateTable) -> Result<Poly<T>, ReactionError> {
    let k = rates.k();
    if !(3..=MAX_K).contains(&k) {
        return Err(ReactionError::BadK(k));
    }
    check_normalized(fates)?;
    let r: Vec<T> = rates.values().iter().map(|&v| T::from_f64(v)).collect();
    let mut phi = Poly::zero();
    for (sig, p) in fates {
        if sig.k() != k {
            return Err(ReactionError::Mismatch { fates: sig.k(), rates: k });
        }
        if p.to_f64() < 0.0 {
            return Err(ReactionError::NegativeProbability(p.to_f64()));
        }
        let j = sig.j();
        let w = grouped_weights(sig, &r);
        for (a, wa) in w.iter().enumerate().skip(1) {
            if wa.is_zero() {
                continue;
            }
            let d = delta_ab::<T>(a, j - a);
            phi = phi + d.poly.scale(&(wa.clone() * p.clone()));
        }
    }
    Ok(phi)
}

/// Assemble and factor the reaction term.
pub fn phi_from_fates<T: Scalar>(
    fates: &[(FateSignature, T)],
    rates: &RateTable,
) -> Result<ReactionTerm<T>, ReactionError> {
    let phi = phi_polynomial(fates, rates)?;
    ReactionTerm::factor(rates.k(), phi)
}

/// [`phi_from_fates`] on a Monte Carlo fate table, with exact `count/total`
/// probabilities when `T` is exact.
pub fn phi_from_distribution<T: Scalar>(
    dist: &FateDistribution,
    rates: &RateTable,
) -> Result<ReactionTerm<T>, ReactionError> {
    if dist.k() != rates.k() {
        return Err(ReactionError::Mismatch {
            fates: dist.k(),
            rates: rates.k(),
        });
    }
    phi_from_fates(&dist.probabilities::<T>(), rates)
}

/// One fate's contribution `sum_a w_a Delta_{a, j-a}` to `phi`, so that
/// `phi = sum over fates of p * contribution`.
pub fn fate_contribution(sig: &FateSignature, rates: &RateTable) -> Poly<f64> {
    let j = sig.j();
    let w = grouped_weights(sig, rates.values());
    w.iter()
        .enumerate()
        .skip(1)
        .fold(Poly::zero(), |acc, (a, wa)| acc + delta_ab::<f64>(a, j - a).poly.scale(wa))
}

/// `phi(u)` from a Monte Carlo fate table with its sampling standard error,
/// from the multinomial variance of the per-fate contributions.
pub fn phi_with_error(dist: &FateDistribution, rates: &RateTable, u: f64) -> Result<(f64, f64), ReactionError> {
    if dist.k() != rates.k() {
        return Err(ReactionError::Mismatch {
            fates: dist.k(),
            rates: rates.k(),
        });
    }
    let (mut m1, mut m2) = (0.0, 0.0);
    for (sig, c) in dist.iter() {
        let p = c as f64 / dist.samples() as f64;
        let g = fate_contribution(sig, rates).eval_f64(u);
        m1 += p * g;
        m2 += p * g * g;
    }
    let var = (m2 - m1 * m1).max(0.0) / dist.samples() as f64;
    Ok((m1, var.sqrt()))
}

/// Mean over sites of `(1 - xi(x)) r_{m(x)} - xi(x) r_{m(x)}`, `m(x)` the
/// number of disagreeing neighbors: the perturbation drift of the density.
pub fn empirical_drift(config: &Configuration, rates: &RateTable) -> Result<f64, ReactionError> {
    let l = config.lattice();
    if l.k() != rates.k() {
        return Err(ReactionError::Mismatch { fates: l.k(), rates: rates.k() });
    }
    let mut total = 0.0;
    for x in 0..l.n() {
        let r = rates.get(config.discordant_count(x));
        total += if config.get(x) { -r } else { r };
    }
    Ok(total / l.n() as f64)
}

/// The seven fate probabilities for a neighborhood of size three.
#[derive(Debug, Clone, PartialEq)]
pub struct K3Fates<T> {
    pub p_0_3: T,
    pub p_1_2: T,
    pub p_2_1: T,
    pub p_3: T,
    pub p_0_21: T,
    pub p_1_11: T,
    pub p_0_111: T,
}

impl<T: Scalar> K3Fates<T> {
    pub fn to_fates(&self) -> Vec<(FateSignature, T)> {
        [
            ("0;3", &self.p_0_3),
            ("1;2", &self.p_1_2),
            ("2;1", &self.p_2_1),
            ("3;", &self.p_3),
            ("0;1,2", &self.p_0_21),
            ("1;1,1", &self.p_1_11),
            ("0;1,1,1", &self.p_0_111),
        ]
        .into_iter()
        .map(|(s, p)| (s.parse().expect("valid signature"), p.clone()))
        .collect()
    }

    pub fn from_fates(fates: &[(FateSignature, T)]) -> Result<Self, ReactionError> {
        let get = |s: &str| {
            let sig: FateSignature = s.parse().expect("valid signature");
            fates
                .iter()
                .find(|(f, _)| *f == sig)
                .map(|(_, p)| p.clone())
                .unwrap_or_else(T::zero)
        };
        if let Some((f, _)) = fates.iter().find(|(f, _)| f.k() != 3) {
            return Err(ReactionError::Mismatch { fates: f.k(), rates: 3 });
        }
        Ok(Self {
            p_0_3: get("0;3"),
            p_1_2: get("1;2"),
            p_2_1: get("2;1"),
            p_3: get("3;"),
            p_0_21: get("0;1,2"),
            p_1_11: get("1;1,1"),
            p_0_111: get("0;1,1,1"),
        })
    }
}

/// Closed form for `k = 3`:
/// `phi / [u(1-u)(1-2u)] = r1 [2 p_{1;1,1} + p_{0;2,1} + 3 p_{0;1,1,1}] + r2 [p_{0;2,1} - p_{1;1,1}]`.
/// Only the three fates with at least two clusters away from the origin
/// contribute.
pub fn phi_k3_explicit<T: Scalar>(p: &K3Fates<T>, rates: &RateTable) -> Result<ReactionTerm<T>, ReactionError> {
    if rates.k() != 3 {
        return Err(ReactionError::Mismatch { fates: 3, rates: rates.k() });
    }
    for v in [&p.p_0_21, &p.p_1_11, &p.p_0_111] {
        if v.to_f64() < 0.0 {
            return Err(ReactionError::NegativeProbability(v.to_f64()));
        }
    }
    let r1 = T::from_f64(rates.get(1));
    let r2 = T::from_f64(rates.get(2));
    let two = T::from_ratio(2, 1);
    let three = T::from_ratio(3, 1);
    let cof = r1 * (two * p.p_1_11.clone() + p.p_0_21.clone() + three * p.p_0_111.clone())
        + r2 * (p.p_0_21.clone() - p.p_1_11.clone());
    ReactionTerm::factor(3, Poly::cubic_root_factor().scale(&cof))
}

/// For one fate with `j` clusters, the margins `w_a - w_{j+1-a}` for
/// `1 <= a <= j/2`. Each pairs `Delta_{a,j-a}` with its mirror
/// `Delta_{j+1-a,a-1} = -Delta_{a,j-a}`, so positive margins make the
/// fate's contribution to `f_k` positive.
pub fn structural_margins(sig: &FateSignature, rates: &RateTable) -> Vec<(usize, f64)> {
    let w = grouped_weights(sig, rates.values());
    let j = sig.j();
    (1..=j / 2).map(|a| (a, w[a] - w[j + 1 - a])).collect()
}

/// A fate and pairing whose margin fails to be positive.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginViolation {
    pub signature: FateSignature,
    pub a: usize,
    pub margin: f64,
}

/// Check every fate signature for `k` in `ks` against the `q < 1` rates.
/// Returns the number of checked pairings and all violations.
pub fn structural_check(ks: impl IntoIterator<Item = usize>) -> Result<(usize, Vec<MarginViolation>), ReactionError> {
    let mut checked = 0;
    let mut bad = Vec::new();
    for k in ks {
        let rates = perturbation_rates(k, Regime::QLt1)?;
        for sig in enumerate_signatures(k) {
            for (a, margin) in structural_margins(&sig, &rates) {
                checked += 1;
                if margin <= 0.0 {
                    bad.push(MarginViolation {
                        signature: sig.clone(),
                        a,
                        margin,
                    });
                }
            }
        }
    }
    Ok((checked, bad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;
    use proptest::prelude::*;

    type Q = BigRational;

    fn q(n: i64, d: i64) -> Q {
        Q::from_ratio(n, d)
    }

    #[test]
    fn k3_rates() {
        let r = perturbation_rates(3, Regime::QLt1).unwrap();
        assert!((r.get(1) - 3f64.ln() / 3.0).abs() < 1e-15);
        assert!((r.get(1) - 0.366204).abs() < 5e-7);
        assert!((r.get(2) - 0.270310).abs() < 5e-7);
        assert_eq!(r.get(3), 0.0);
        let neg = perturbation_rates(3, Regime::QGt1).unwrap();
        assert_eq!(neg.get(1), -r.get(1));
        assert!(perturbation_rates(2, Regime::QLt1).is_err());
    }

    #[test]
    fn delta_identities() {
        assert!(delta_ab::<Q>(3, 2).poly.is_zero());
        assert_eq!(delta_ab::<Q>(1, 1).poly, Poly::cubic_root_factor());
        assert_eq!(delta_ab::<Q>(3, 0).poly, -delta_ab::<Q>(1, 2).poly);
    }

    proptest! {
        #[test]
        fn delta_factored_form(a in 0usize..8, b in 0usize..8) {
            let d = delta_ab::<Q>(a, b);
            prop_assert_eq!(d.expand(), d.poly.clone());
            if a >= 1 {
                prop_assert_eq!(d.poly.clone(), -delta_ab::<Q>(b + 1, a - 1).poly);
            }
        }

        #[test]
        fn random_fates_factor_exactly(k in 3usize..7, weights in proptest::collection::vec(1i64..50, 40)) {
            let sigs = enumerate_signatures(k);
            let w: Vec<i64> = sigs.iter().enumerate().map(|(i, _)| weights[i % weights.len()]).collect();
            let total: i64 = w.iter().sum();
            let fates: Vec<(FateSignature, Q)> = sigs.into_iter().zip(w).map(|(s, x)| (s, q(x, total))).collect();
            let rates = perturbation_rates(k, Regime::QLt1).unwrap();
            let term = phi_from_fates(&fates, &rates).unwrap();
            prop_assert_eq!(term.sign, 1);
            prop_assert_eq!(term.f_k.eval(&q(0, 1)), q(1, 1));
            prop_assert_eq!(term.f_k.eval(&q(1, 1)), q(1, 1));
            prop_assert_eq!(term.phi.compose_one_minus(), -term.phi.clone());
            let neg = phi_from_fates(&fates, &rates.negated()).unwrap();
            prop_assert_eq!(neg.phi, -term.phi.clone());
            prop_assert_eq!(neg.sign, -1);
        }
    }

    fn sample_k3() -> K3Fates<Q> {
        K3Fates {
            p_0_3: q(1, 20),
            p_1_2: q(1, 10),
            p_2_1: q(3, 20),
            p_3: q(1, 20),
            p_0_21: q(1, 5),
            p_1_11: q(1, 5),
            p_0_111: q(1, 4),
        }
    }

    #[test]
    fn k3_closed_form_matches_assembler() {
        let rates = perturbation_rates(3, Regime::QLt1).unwrap();
        let p = sample_k3();
        let general = phi_from_fates(&p.to_fates(), &rates).unwrap();
        let closed = phi_k3_explicit(&p, &rates).unwrap();
        assert_eq!(general, closed);
        assert_eq!(K3Fates::from_fates(&p.to_fates()).unwrap(), p);
        for x in [q(0, 1), q(1, 2), q(1, 1)] {
            assert!(general.phi.eval(&x) == q(0, 1));
        }
    }

    #[test]
    fn single_cluster_fates_give_zero() {
        let rates = perturbation_rates(3, Regime::QLt1).unwrap();
        let p = K3Fates {
            p_0_3: q(1, 4),
            p_1_2: q(1, 4),
            p_2_1: q(1, 4),
            p_3: q(1, 4),
            p_0_21: q(0, 1),
            p_1_11: q(0, 1),
            p_0_111: q(0, 1),
        };
        assert!(phi_polynomial(&p.to_fates(), &rates).unwrap().is_zero());
        assert_eq!(phi_k3_explicit(&p, &rates), Err(ReactionError::Degenerate));
    }

    #[test]
    fn k3_positivity_margin() {
        let rates = perturbation_rates(3, Regime::QLt1).unwrap();
        let sig: FateSignature = "1;1,1".parse().unwrap();
        let margins = structural_margins(&sig, &rates);
        let expect = 2.0 / 3.0 * 3f64.ln() - 2.0 / 3.0 * 1.5f64.ln();
        assert_eq!(margins.len(), 1);
        assert!((margins[0].1 - expect).abs() < 1e-15);
        // at r2 = 2 r1 the margin closes and the 1;1,1 fate drops out
        let edge = RateTable::new(vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        assert_eq!(structural_margins(&sig, &edge)[0].1, 0.0);
        let only = vec![(sig, q(1, 1))];
        assert!(phi_polynomial(&only, &edge).unwrap().is_zero());
    }

    #[test]
    fn exhaustive_structural_check() {
        let (checked, bad) = structural_check(3..=8).unwrap();
        assert!(checked > 50);
        assert!(bad.is_empty(), "{bad:?}");
    }

    #[test]
    fn float_mode_matches_exact() {
        let rates = perturbation_rates(3, Regime::QLt1).unwrap();
        let p = sample_k3();
        let exact = phi_from_fates(&p.to_fates(), &rates).unwrap();
        let fl: Vec<(FateSignature, f64)> = p.to_fates().into_iter().map(|(s, x)| (s, x.to_f64())).collect();
        let approx = phi_from_fates(&fl, &rates).unwrap();
        assert!((approx.c_k - exact.c_k.to_f64()).abs() < 1e-14);
        assert!(approx.to_csv().starts_with("sign,c_k\n1,"));
        assert!(approx.factored_string().starts_with('+'));
    }

    #[test]
    fn contributions_sum_to_phi() {
        let rates = perturbation_rates(3, Regime::QLt1).unwrap();
        let fates: Vec<(FateSignature, f64)> = sample_k3().to_fates().into_iter().map(|(s, p)| (s, p.to_f64())).collect();
        let phi = phi_polynomial(&fates, &rates).unwrap();
        let sum = fates
            .iter()
            .fold(Poly::zero(), |acc, (s, p)| acc + fate_contribution(s, &rates).scale(p));
        for i in 0..=10 {
            let u = i as f64 / 10.0;
            assert!((phi.eval_f64(u) - sum.eval_f64(u)).abs() < 1e-14);
        }
    }

    #[test]
    fn drift_of_isolated_one() {
        use crate::lattice::TorusLattice;
        use std::sync::Arc;
        let t = Arc::new(TorusLattice::nearest_neighbor(5).unwrap());
        let rates = perturbation_rates(6, Regime::QLt1).unwrap();
        let c = Configuration::indicator(t, &[0]);
        // the 1 has six disagreeing neighbors (r_6 = 0); six 0s see one 1 each
        let expect = 6.0 * rates.get(1) / 125.0;
        assert!((empirical_drift(&c, &rates).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn mismatched_inputs() {
        let rates = perturbation_rates(4, Regime::QLt1).unwrap();
        assert!(matches!(
            phi_from_fates(&sample_k3().to_fates(), &rates),
            Err(ReactionError::Mismatch { .. })
        ));
        let mut bad = sample_k3().to_fates();
        bad[0].1 = q(0, 1);
        assert!(matches!(
            phi_from_fates(&bad, &perturbation_rates(3, Regime::QLt1).unwrap()),
            Err(ReactionError::Equilibrium(_))
        ));
    }

    #[test]
    fn drift_matches_phi_of_torus_fates() {
        use crate::equilibrium::{sample_nu_u, torus_fates};
        use crate::lattice::TorusLattice;
        use crate::rng::replica_rng;
        use std::sync::Arc;
        let lat = Arc::new(TorusLattice::nearest_neighbor(6).unwrap());
        let rates = perturbation_rates(6, Regime::QLt1).unwrap();
        let (u, burn) = (0.3, 3.0);
        let fates = torus_fates(&lat, burn, 200_000, 11).unwrap();
        let (p, p_se) = phi_with_error(&fates, &rates, u).unwrap();
        let drifts: Vec<f64> = (0..3000)
            .map(|i| {
                let c = sample_nu_u(lat.clone(), u, burn, &mut replica_rng(12, i)).unwrap();
                empirical_drift(&c, &rates).unwrap()
            })
            .collect();
        let n = drifts.len() as f64;
        let m = drifts.iter().sum::<f64>() / n;
        let se = (drifts.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!((m - p).abs() < 4.0 * se.hypot(p_se), "drift {m} +- {se}, phi {p} +- {p_se}");
    }
}
