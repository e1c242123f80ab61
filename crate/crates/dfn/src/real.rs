//! Forward-mode scalar differentiation.
//!
//! Element residual kernels are written once, generically over [`Real`].
//! Evaluating them with `f64` gives the residual; evaluating with [`Dual`]
//! seeded on element unknowns gives the element tangent, and seeding a model
//! parameter instead gives the residual's parameter derivative. Transcendental
//! functions are trait default methods built on [`Real::chain`], so a scalar
//! type only has to provide arithmetic and the chain rule.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar abstraction over `f64` and dual numbers.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;

    /// A value seeded as the `lane`-th differentiation variable. Plain `f64`
    /// carries no derivative lanes, so seeding is a no-op there.
    fn lane_variable(v: f64, lane: usize) -> Self;

    /// Primal value.
    fn value(self) -> f64;

    /// Chain rule: builds `f(x)` from the primal result `f` and slope `dfdx`.
    fn chain(x: Self, f: f64, dfdx: f64) -> Self;

    fn exp(self) -> Self {
        let e = self.value().exp();
        Self::chain(self, e, e)
    }

    fn ln(self) -> Self {
        let v = self.value();
        Self::chain(self, v.ln(), 1.0 / v)
    }

    fn sqrt(self) -> Self {
        let s = self.value().sqrt();
        Self::chain(self, s, 0.5 / s)
    }

    fn sinh(self) -> Self {
        let v = self.value();
        Self::chain(self, v.sinh(), v.cosh())
    }

    fn cosh(self) -> Self {
        let v = self.value();
        Self::chain(self, v.cosh(), v.sinh())
    }

    fn tanh(self) -> Self {
        let t = self.value().tanh();
        Self::chain(self, t, 1.0 - t * t)
    }

    /// Power with a constant exponent.
    fn powf(self, p: f64) -> Self {
        let v = self.value();
        Self::chain(self, v.powf(p), p * v.powf(p - 1.0))
    }

    /// Power with a differentiable exponent, via `x^e = exp(e ln x)`.
    ///
    /// Requires a positive base. For base exactly 1 the derivative with
    /// respect to the exponent vanishes identically, as it must.
    fn powr(self, e: Self) -> Self {
        (e * self.ln()).exp()
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn lane_variable(v: f64, _lane: usize) -> Self {
        v
    }

    #[inline]
    fn value(self) -> f64 {
        self
    }

    #[inline]
    fn chain(_x: Self, f: f64, _dfdx: f64) -> Self {
        f
    }
}

/// Dual number carrying `N` simultaneous directional derivatives.
#[derive(Clone, Copy, Debug)]
pub struct Dual<const N: usize> {
    pub val: f64,
    pub der: [f64; N],
}

impl<const N: usize> Dual<N> {
    #[inline]
    pub fn constant(val: f64) -> Self {
        Self { val, der: [0.0; N] }
    }

    /// A variable seeded on derivative lane `lane`.
    #[inline]
    pub fn variable(val: f64, lane: usize) -> Self {
        let mut der = [0.0; N];
        der[lane] = 1.0;
        Self { val, der }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.val += rhs.val;
        for i in 0..N {
            self.der[i] += rhs.der[i];
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.val -= rhs.val;
        for i in 0..N {
            self.der[i] -= rhs.der[i];
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut der = [0.0; N];
        for i in 0..N {
            der[i] = self.der[i] * rhs.val + self.val * rhs.der[i];
        }
        Self {
            val: self.val * rhs.val,
            der,
        }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.val;
        let v = self.val * inv;
        let mut der = [0.0; N];
        for i in 0..N {
            der[i] = (self.der[i] - v * rhs.der[i]) * inv;
        }
        Self { val: v, der }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.val = -self.val;
        for i in 0..N {
            self.der[i] = -self.der[i];
        }
        self
    }
}

impl<const N: usize> Real for Dual<N> {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Self::constant(x)
    }

    #[inline]
    fn lane_variable(v: f64, lane: usize) -> Self {
        Self::variable(v, lane)
    }

    #[inline]
    fn value(self) -> f64 {
        self.val
    }

    #[inline]
    fn chain(x: Self, f: f64, dfdx: f64) -> Self {
        let mut der = [0.0; N];
        for i in 0..N {
            der[i] = dfdx * x.der[i];
        }
        Self { val: f, der }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn dual_matches_finite_differences() {
        let f = |x: f64| (x.sinh() * x.sqrt() + (2.0 * x).ln()).tanh() / (1.0 + x * x);
        let g = |x: Dual<1>| {
            let two = Dual::constant(2.0);
            let one = Dual::constant(1.0);
            (x.sinh() * x.sqrt() + (two * x).ln()).tanh() / (one + x * x)
        };
        for &x in &[0.3, 1.1, 2.7] {
            let d = g(Dual::variable(x, 0));
            assert!((d.val - f(x)).abs() < 1e-14);
            assert!(
                (d.der[0] - fd(f, x)).abs() < 1e-7,
                "x = {x}: {} vs {}",
                d.der[0],
                fd(f, x)
            );
        }
    }

    #[test]
    fn powr_derivative_in_exponent() {
        // d/db (x^b) = x^b ln x; at x = 1 it vanishes for every b.
        let x = 0.3;
        let b = Dual::<1>::variable(1.5, 0);
        let y = Dual::constant(x).powr(b);
        assert!((y.val - x.powf(1.5)).abs() < 1e-15);
        assert!((y.der[0] - x.powf(1.5) * x.ln()).abs() < 1e-14);

        let at_one = Dual::<1>::constant(1.0).powr(b);
        assert_eq!(at_one.der[0], 0.0);
    }

    #[test]
    fn multi_lane_seeding() {
        // f(x, y) = x * y + sinh(x)
        let x = Dual::<2>::variable(0.7, 0);
        let y = Dual::<2>::variable(1.9, 1);
        let f = x * y + x.sinh();
        assert!((f.der[0] - (1.9 + 0.7f64.cosh())).abs() < 1e-14);
        assert!((f.der[1] - 0.7).abs() < 1e-14);
    }
}
