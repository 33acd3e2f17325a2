//! Closed-form deep ReLU components.
//!
//! Every component here is a fixed ReLU network evaluated by direct
//! composition: a trapezoid locality identifier, a sawtooth-based square
//! approximator and a left-nested product approximator built on top of it.
//! The evaluators are generic over [`ReluScalar`], so the same code runs on
//! plain `f64` and on any instrumented scalar that wants to observe which
//! primitives a component uses.

use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Arithmetic available to a ReLU network: the activation, addition and
/// multiplication by a fixed real weight.
pub trait ReluScalar: Copy + Add<Output = Self> + Sub<Output = Self> {
    /// A bias term.
    fn constant(c: f64) -> Self;

    fn relu(self) -> Self;

    /// Multiplication by a fixed weight.
    fn scale(self, c: f64) -> Self;

    /// Division by a fixed weight. Structurally this is still a scalar
    /// multiplication; `f64` overrides it so the rounding matches `x / c`.
    fn unscale(self, c: f64) -> Self {
        self.scale(1.0 / c)
    }
}

impl ReluScalar for f64 {
    #[inline]
    fn constant(c: f64) -> Self {
        c
    }

    #[inline]
    fn relu(self) -> Self {
        relu(self)
    }

    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }

    #[inline]
    fn unscale(self, c: f64) -> Self {
        self / c
    }
}

#[inline]
pub fn relu(t: f64) -> f64 {
    if t > 0.0 {
        t
    } else {
        0.0
    }
}

/// Depth and operand range shared by the square and product components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentParams {
    pub m: u32,
    pub lo: f64,
    pub hi: f64,
}

impl ComponentParams {
    pub fn new(m: u32, lo: f64, hi: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParameter("component depth m must be at least 1".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!(
                "operand range [{lo}, {hi}] must be finite with lo < hi"
            )));
        }
        Ok(Self { m, lo, hi })
    }

    /// Range `[2a, 2b]` for the sum operand of a two-factor product, one
    /// level deeper so its absolute error matches the single squares.
    fn doubled(&self) -> Self {
        Self {
            m: self.m + 1,
            lo: 2.0 * self.lo,
            hi: 2.0 * self.hi,
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Uniform bound on `|square_scaled(t) - t^2|` over the operand range.
    pub fn square_error_bound(&self) -> f64 {
        let w = self.width();
        w * w * 0.25f64.powi(self.m as i32 + 1)
    }

    /// Bound on `|prod2(t1, t2) - t1 t2|`: half the sum of three square
    /// errors, each at most [`Self::square_error_bound`].
    pub fn prod2_error_bound(&self) -> f64 {
        1.5 * self.square_error_bound()
    }

    /// Bound on `|prod_j(ts) - prod(ts)|` for `j` operands drawn from the
    /// operand range, of the form `c * j * 2^-m`.
    ///
    /// Each nesting level adds one `prod2` error and multiplies the error
    /// carried so far by at most `R = max(|a|, |b|, 1)`.
    pub fn prod_error_bound(&self, j: usize) -> f64 {
        if j <= 1 {
            return 0.0;
        }
        let r = self.lo.abs().max(self.hi.abs()).max(1.0);
        let c = self.prod2_error_bound() * 2f64.powi(self.m as i32) * r.powi(j as i32 - 2);
        c * j as f64 * 0.5f64.powi(self.m as i32)
    }
}

/// A trapezoid `T` equal to 1 on `[lo, hi]`, vanishing outside
/// `[lo - tau, hi + tau]` and linear on the two overlap strips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapezoidSpec {
    pub lo: f64,
    pub hi: f64,
    pub tau: f64,
}

impl TrapezoidSpec {
    pub fn new(lo: f64, hi: f64, tau: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!(
                "trapezoid interval [{lo}, {hi}] must satisfy lo < hi"
            )));
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidParameter(format!("overlap tau = {tau} must lie in (0, 1]")));
        }
        Ok(Self { lo, hi, tau })
    }
}

/// Width-4, depth-1 locality identifier.
#[inline]
pub fn trapezoid<T: ReluScalar>(t: T, spec: &TrapezoidSpec) -> T {
    let TrapezoidSpec { lo, hi, tau } = *spec;
    let rising = (t - T::constant(lo) + T::constant(tau)).relu() - (t - T::constant(lo)).relu();
    let falling = (t - T::constant(hi)).relu() - (t - T::constant(hi) - T::constant(tau)).relu();
    (rising - falling).unscale(tau)
}

/// Hat map `g(t) = 2 relu(t) - 4 relu(t - 1/2)`.
#[inline]
fn hat<T: ReluScalar>(t: T) -> T {
    t.relu().scale(2.0) - (t - T::constant(0.5)).relu().scale(4.0)
}

/// `s`-fold composition of the hat map: a sawtooth with `2^(s-1)` teeth on
/// `[0, 1]`.
pub fn sawtooth<T: ReluScalar>(t: T, s: u32) -> T {
    assert!(s >= 1, "sawtooth order must be at least 1");
    let mut g = t;
    for _ in 0..s {
        g = hat(g);
    }
    g
}

/// `t - sum_{s=1}^{m} g_s(t) / 4^s`, the piecewise-linear interpolant of
/// `t^2` on the dyadic grid `i / 2^m` of `[0, 1]`.
pub fn square_unit<T: ReluScalar>(t: T, m: u32) -> T {
    assert!(m >= 1, "square component depth must be at least 1");
    let mut acc = t;
    let mut g = t;
    let mut weight = 1.0;
    for _ in 0..m {
        g = hat(g);
        weight *= 0.25;
        acc = acc - g.scale(weight);
    }
    acc
}

/// Square component on an arbitrary range `[a, b]`, obtained by mapping
/// the range affinely onto `[0, 1]`.
pub fn square_scaled<T: ReluScalar>(t: T, params: &ComponentParams) -> T {
    let a = params.lo;
    let w = params.width();
    let u = (t - T::constant(a)).unscale(w);
    square_unit(u, params.m).scale(w * w) + u.scale(2.0 * a * w) + T::constant(a * a)
}

/// Two-factor product component
/// `(SG(t1 + t2) - SG(t1) - SG(t2)) / 2`.
///
/// The sum is squared over `[2a, 2b]`. The two single squares are added
/// before being subtracted so the result is bit-symmetric in its operands.
pub fn prod2<T: ReluScalar>(t1: T, t2: T, params: &ComponentParams) -> T {
    let sum_sq = square_scaled(t1 + t2, &params.doubled());
    let singles = square_scaled(t1, params) + square_scaled(t2, params);
    (sum_sq - singles).scale(0.5)
}

/// Left-nested product component `PG(...PG(PG(t1, t2), t3)..., tJ)`.
pub fn prod_j<T: ReluScalar>(ts: &[T], params: &ComponentParams) -> Result<T> {
    let (&first, rest) = ts
        .split_first()
        .ok_or_else(|| Error::InvalidParameter("product component needs at least one operand".into()))?;
    Ok(rest.iter().fold(first, |acc, &t| prod2(acc, t, params)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(m: u32) -> ComponentParams {
        ComponentParams::new(m, 0.0, 1.0).unwrap()
    }

    #[test]
    fn relu_values() {
        assert_eq!(relu(0.0), 0.0);
        assert_eq!(relu(-2.5), 0.0);
        assert_eq!(relu(3.0), 3.0);
    }

    #[test]
    fn trapezoid_examples() {
        let spec = TrapezoidSpec::new(-0.1, 0.2, 0.05).unwrap();
        assert_eq!(trapezoid(spec.lo, &spec), 1.0);
        assert!(trapezoid(spec.hi + spec.tau, &spec).abs() < 1e-12);
        assert!((trapezoid(spec.hi + spec.tau / 2.0, &spec) - 0.5).abs() < 1e-12);
        assert_eq!(trapezoid(5.0, &spec), 0.0);
        assert_eq!(trapezoid(-5.0, &spec), 0.0);
    }

    #[test]
    fn trapezoid_spec_validation() {
        assert!(TrapezoidSpec::new(0.0, 0.0, 0.1).is_err());
        assert!(TrapezoidSpec::new(0.0, 1.0, 0.0).is_err());
        assert!(TrapezoidSpec::new(0.0, 1.0, 1.5).is_err());
        assert!(TrapezoidSpec::new(0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn sawtooth_examples() {
        for s in 1..6 {
            assert_eq!(sawtooth(0.0, s), 0.0);
        }
        assert_eq!(sawtooth(0.5, 1), 1.0);
        assert_eq!(sawtooth(0.25, 2), 1.0);
        // 2^(s-1) teeth: peaks at odd multiples of 2^-s
        assert_eq!(sawtooth(0.125, 3), 1.0);
        assert_eq!(sawtooth(0.375, 3), 1.0);
        assert_eq!(sawtooth(0.25, 3), 0.0);
    }

    #[test]
    fn square_unit_examples() {
        assert_eq!(square_unit(0.0, 4), 0.0);
        assert_eq!(square_unit(0.5, 1), 0.25);
        assert_eq!(square_unit(0.25, 2), 0.0625);
        assert_eq!(square_unit(1.0, 7), 1.0);
    }

    #[test]
    fn square_scaled_endpoints_and_bound() {
        let p = ComponentParams::new(3, -2.0, 2.0).unwrap();
        assert_eq!(square_scaled(-2.0, &p), 4.0);
        assert_eq!(square_scaled(2.0, &p), 4.0);
        let v = square_scaled(0.3, &p);
        assert!((v - 0.09).abs() <= 16.0 * 2f64.powi(-8));
        assert!((v - 0.09).abs() <= p.square_error_bound());
    }

    #[test]
    fn prod2_examples() {
        let p = ComponentParams::new(3, -1.5, 2.0).unwrap();
        assert_eq!(prod2(-1.5, -1.5, &p), 2.25);
        for m in 1..8 {
            assert_eq!(prod2(0.5, 0.5, &unit(m)), 0.25);
        }
        for &t in &[0.0, 0.1, 0.37, 0.5, 0.9, 1.0] {
            assert_eq!(prod2(t, 0.0, &unit(5)), 0.0, "t = {t}");
        }
    }

    #[test]
    fn prod_j_examples() {
        let p = ComponentParams::new(8, 0.0, 1.0).unwrap();
        assert_eq!(prod_j(&[0.3], &p).unwrap(), 0.3);
        assert!(prod_j::<f64>(&[], &p).is_err());
        let v = prod_j(&[0.5, 0.5, 0.5], &p).unwrap();
        assert!((v - 0.125).abs() <= 3.0 * 2f64.powi(-8));

        let wide = ComponentParams::new(8, -2.0, 2.0).unwrap();
        let v = prod_j(&[1.0, 1.0, 1.0], &wide).unwrap();
        assert!((v - 1.0).abs() <= wide.prod_error_bound(3), "{v}");
    }

    #[test]
    fn params_validation() {
        assert!(ComponentParams::new(0, 0.0, 1.0).is_err());
        assert!(ComponentParams::new(2, 1.0, 1.0).is_err());
        assert!(ComponentParams::new(2, 0.0, f64::NAN).is_err());
    }
}
