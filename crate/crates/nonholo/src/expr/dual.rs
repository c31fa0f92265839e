//! Forward-mode dual numbers, nestable for higher derivatives.
//!
//! `Real` abstracts the scalar the evaluator runs on. `f64` implements it,
//! and so does `Dual<T>` for any `T: Real`, so `Dual<Dual<f64>>` yields
//! exact second derivatives and deeper nestings exact mixed partials of
//! whole solver pipelines (Newton solves included, via a polish step after
//! convergence).

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;

    /// Real part, stripped of all derivative information.
    fn value(self) -> f64;

    /// True when every derivative component is exactly zero.
    fn is_constant(self) -> bool;

    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    /// Integer power by binary exponentiation; exact for negative and zero
    /// bases, with derivatives flowing through the multiplications.
    fn powi(self, n: i64) -> Self {
        if n == 0 {
            return Self::one();
        }
        let mut base = if n < 0 { Self::one() / self } else { self };
        let mut exp = n.unsigned_abs();
        let mut acc = Self::one();
        while exp > 0 {
            if exp & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            exp >>= 1;
        }
        acc
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn value(self) -> f64 {
        self
    }

    #[inline]
    fn is_constant(self) -> bool {
        true
    }

    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }

    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }

    #[inline]
    fn tan(self) -> Self {
        f64::tan(self)
    }

    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }

    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }

    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }

    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

/// First-order jet `re + eps*du` with `eps^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub du: T,
}

impl<T: Real> Dual<T> {
    #[inline]
    pub fn new(re: T, du: T) -> Self {
        Dual { re, du }
    }

    #[inline]
    pub fn constant(re: T) -> Self {
        Dual {
            re,
            du: T::zero(),
        }
    }

    /// Seed with unit derivative: the variable of differentiation.
    #[inline]
    pub fn seeded(re: T) -> Self {
        Dual { re, du: T::one() }
    }

    fn is_identically_zero(self) -> bool {
        self.re.value() == 0.0 && self.re.is_constant() && self.du_is_zero()
    }

    fn du_is_zero(self) -> bool {
        self.du.value() == 0.0 && self.du.is_constant()
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Dual::new(self.re + rhs.re, self.du + rhs.du)
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Dual::new(self.re - rhs.re, self.du - rhs.du)
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Dual::new(self.re * rhs.re, self.du * rhs.re + self.re * rhs.du)
    }
}

impl<T: Real> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let q = self.re / rhs.re;
        Dual::new(q, (self.du - q * rhs.du) / rhs.re)
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.du)
    }
}

impl<T: Real> Real for Dual<T> {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::constant(T::from_f64(v))
    }

    #[inline]
    fn value(self) -> f64 {
        self.re.value()
    }

    #[inline]
    fn is_constant(self) -> bool {
        self.re.is_constant() && self.du_is_zero()
    }

    fn sin(self) -> Self {
        Dual::new(self.re.sin(), self.du * self.re.cos())
    }

    fn cos(self) -> Self {
        Dual::new(self.re.cos(), -(self.du * self.re.sin()))
    }

    fn tan(self) -> Self {
        let c = self.re.cos();
        Dual::new(self.re.tan(), self.du / (c * c))
    }

    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        Dual::new(r, self.du / (r + r))
    }

    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.du * e)
    }

    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }

    fn abs(self) -> Self {
        if self.is_identically_zero() {
            return self;
        }
        let sign = T::from_f64(if self.re.value() < 0.0 { -1.0 } else { 1.0 });
        Dual::new(self.re.abs(), self.du * sign)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type D1 = Dual<f64>;
    type D2 = Dual<Dual<f64>>;

    #[test]
    fn first_derivative_of_product() {
        // d/dx [x * sin(x)] = sin(x) + x cos(x)
        let x = 1.3_f64;
        let d = D1::seeded(x) * D1::seeded(x).sin();
        assert!((d.re - x * x.sin()).abs() < 1e-15);
        assert!((d.du - (x.sin() + x * x.cos())).abs() < 1e-15);
    }

    #[test]
    fn second_derivative_via_nesting() {
        // d2/dx2 [exp(2x)] = 4 exp(2x)
        let x = 0.4_f64;
        let seed: D2 = Dual::new(Dual::seeded(x), Dual::constant(1.0));
        let two = D2::from_f64(2.0);
        let y = (two * seed).exp();
        let expected = 4.0 * (2.0 * x).exp();
        assert!((y.du.du - expected).abs() < 1e-13);
    }

    #[test]
    fn integer_power_handles_negative_base() {
        let x = D1::seeded(-2.0);
        let y = x.powi(3);
        assert_eq!(y.re, -8.0);
        assert_eq!(y.du, 12.0); // 3 x^2
        let inv = x.powi(-2);
        assert!((inv.re - 0.25).abs() < 1e-15);
        assert!((inv.du - 0.25).abs() < 1e-15); // -2 x^-3 = 0.25
    }

    #[test]
    fn constant_detection() {
        let c = D2::from_f64(3.5);
        assert!(c.is_constant());
        let x: D1 = Dual::seeded(2.0);
        assert!(!x.is_constant());
        assert!(Dual::<f64>::constant(2.0).is_constant());
    }
}
