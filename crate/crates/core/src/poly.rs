//! Univariate polynomials in the density `u` over a generic coefficient field.
//!
//! `Poly<BigRational>` gives exact arithmetic; `Poly<f64>` is the fast path
//! for Monte Carlo inputs.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Coefficient field for [`Poly`].
pub trait Scalar:
    Clone
    + fmt::Debug
    + fmt::Display
    + PartialEq
    + PartialOrd
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Send
    + Sync
{
    /// True for fields where equality tests are meaningful.
    const EXACT: bool;
    /// The exact binary value of `x` for rationals.
    fn from_f64(x: f64) -> Self;
    fn from_ratio(num: i64, den: i64) -> Self;
    fn to_f64(&self) -> f64;
    fn abs_val(&self) -> Self;
}

impl Scalar for f64 {
    const EXACT: bool = false;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn from_ratio(num: i64, den: i64) -> Self {
        num as f64 / den as f64
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn abs_val(&self) -> Self {
        self.abs()
    }
}

impl Scalar for BigRational {
    const EXACT: bool = true;
    fn from_f64(x: f64) -> Self {
        BigRational::from_float(x).expect("finite float")
    }
    fn from_ratio(num: i64, den: i64) -> Self {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn abs_val(&self) -> Self {
        self.abs()
    }
}

/// Coefficients in the monomial basis, lowest degree first, with trailing
/// zeros trimmed. The zero polynomial has no coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly<T> {
    coeffs: Vec<T>,
}

impl<T: Scalar> Poly<T> {
    pub fn new(mut coeffs: Vec<T>) -> Self {
        while coeffs.last().is_some_and(|c| c.is_zero()) {
            coeffs.pop();
        }
        Self { coeffs }
    }

    pub fn zero() -> Self {
        Self { coeffs: Vec::new() }
    }

    pub fn constant(c: T) -> Self {
        Self::new(vec![c])
    }

    pub fn one() -> Self {
        Self::constant(T::one())
    }

    /// `c * u^d`.
    pub fn monomial(c: T, d: usize) -> Self {
        let mut v = vec![T::zero(); d + 1];
        v[d] = c;
        Self::new(v)
    }

    /// The polynomial `u`.
    pub fn u() -> Self {
        Self::monomial(T::one(), 1)
    }

    /// The polynomial `1 - u`.
    pub fn one_minus_u() -> Self {
        Self::new(vec![T::one(), -T::one()])
    }

    /// `u^a (1-u)^b`.
    pub fn basis_term(a: usize, b: usize) -> Self {
        Self::u().pow(a) * Self::one_minus_u().pow(b)
    }

    /// `u (1-u) (1-2u)`.
    pub fn cubic_root_factor() -> Self {
        let two = T::one() + T::one();
        Self::u() * Self::one_minus_u() * Self::new(vec![T::one(), -two])
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn coeff(&self, i: usize) -> T {
        self.coeffs.get(i).cloned().unwrap_or_else(T::zero)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn degree(&self) -> Option<usize> {
        self.coeffs.len().checked_sub(1)
    }

    pub fn pow(&self, n: usize) -> Self {
        let mut out = Self::one();
        for _ in 0..n {
            out = out * self.clone();
        }
        out
    }

    pub fn scale(&self, c: &T) -> Self {
        Self::new(self.coeffs.iter().map(|x| x.clone() * c.clone()).collect())
    }

    pub fn eval(&self, u: &T) -> T {
        self.coeffs
            .iter()
            .rev()
            .fold(T::zero(), |acc, c| acc * u.clone() + c.clone())
    }

    pub fn eval_f64(&self, u: f64) -> f64 {
        self.coeffs
            .iter()
            .rev()
            .fold(0.0, |acc, c| acc * u + c.to_f64())
    }

    /// Derivative.
    pub fn derivative(&self) -> Self {
        Self::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, c)| c.clone() * T::from_ratio(i as i64, 1))
                .collect(),
        )
    }

    /// `p(1 - u)`.
    pub fn compose_one_minus(&self) -> Self {
        let base = Self::one_minus_u();
        let mut out = Self::zero();
        let mut power = Self::one();
        for c in &self.coeffs {
            out = out + power.scale(c);
            power = power * base.clone();
        }
        out
    }

    /// Euclidean division. Panics on a zero divisor.
    pub fn div_rem(&self, divisor: &Self) -> (Self, Self) {
        let d = divisor.degree().expect("division by the zero polynomial");
        let lead = divisor.coeffs[d].clone();
        let mut rem = self.coeffs.clone();
        if rem.len() <= d {
            return (Self::zero(), self.clone());
        }
        let mut quot = vec![T::zero(); rem.len() - d];
        for i in (0..quot.len()).rev() {
            let c = rem[i + d].clone() / lead.clone();
            for (j, dc) in divisor.coeffs.iter().enumerate() {
                rem[i + j] = rem[i + j].clone() - c.clone() * dc.clone();
            }
            // the leading term cancels exactly in exact arithmetic
            rem[i + d] = T::zero();
            quot[i] = c;
        }
        (Self::new(quot), Self::new(rem))
    }

    /// Sum of absolute coefficients, as a float.
    pub fn l1_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.to_f64().abs()).sum()
    }

    pub fn to_f64(&self) -> Poly<f64> {
        Poly::new(self.coeffs.iter().map(|c| c.to_f64()).collect())
    }

    pub fn map<S: Scalar>(&self, f: impl Fn(&T) -> S) -> Poly<S> {
        Poly::new(self.coeffs.iter().map(f).collect())
    }
}

impl<T: Scalar> Add for Poly<T> {
    type Output = Poly<T>;
    fn add(self, rhs: Self) -> Self {
        let n = self.coeffs.len().max(rhs.coeffs.len());
        Poly::new((0..n).map(|i| self.coeff(i) + rhs.coeff(i)).collect())
    }
}

impl<T: Scalar> Sub for Poly<T> {
    type Output = Poly<T>;
    fn sub(self, rhs: Self) -> Self {
        let n = self.coeffs.len().max(rhs.coeffs.len());
        Poly::new((0..n).map(|i| self.coeff(i) - rhs.coeff(i)).collect())
    }
}

impl<T: Scalar> Neg for Poly<T> {
    type Output = Poly<T>;
    fn neg(self) -> Self {
        Poly::new(self.coeffs.into_iter().map(|c| -c).collect())
    }
}

impl<T: Scalar> Mul for Poly<T> {
    type Output = Poly<T>;
    fn mul(self, rhs: Self) -> Self {
        if self.is_zero() || rhs.is_zero() {
            return Poly::zero();
        }
        let mut out = vec![T::zero(); self.coeffs.len() + rhs.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in rhs.coeffs.iter().enumerate() {
                out[i + j] = out[i + j].clone() + a.clone() * b.clone();
            }
        }
        Poly::new(out)
    }
}

impl<T: Scalar> fmt::Display for Poly<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut first = true;
        for (i, c) in self.coeffs.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            match i {
                0 => write!(f, "{c}")?,
                1 => write!(f, "({c})*u")?,
                _ => write!(f, "({c})*u^{i}")?,
            }
        }
        Ok(())
    }
}
