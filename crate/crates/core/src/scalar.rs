//! Scalar abstraction shared by the model, tabular and planning code.
//!
//! Everything numeric in the crate is written against [`Scalar`], so the same
//! code runs on `f32`, `f64`, and on [`Dual`] numbers. The dual type carries a
//! directional derivative alongside each value; running a reverse-mode
//! gradient on duals yields a Hessian-vector product.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{
    Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign,
};

use num_traits::{Float, FromPrimitive, Num, NumAssign, NumCast, One, ToPrimitive, Zero};

/// Real scalar used throughout the crate.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Converts from `f64`; lossy for narrower types.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    /// Converts to `f64` (value part only for duals).
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + NumAssign
        + Sum
        + Default
        + fmt::Debug
        + fmt::Display
        + Send
        + Sync
        + 'static
{
}

/// Forward-mode dual number `re + eps·ε` with `ε² = 0`.
///
/// Ordering and classification look only at the value part, which is what
/// piecewise functions (relu, clamps, heading wrap) need to pick a branch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual<S> {
    pub re: S,
    pub eps: S,
}

impl<S: Scalar> Dual<S> {
    pub fn new(re: S, eps: S) -> Self {
        Self { re, eps }
    }

    pub fn constant(re: S) -> Self {
        Self { re, eps: S::zero() }
    }

    #[inline]
    fn chain(self, value: S, deriv: S) -> Self {
        Self { re: value, eps: self.eps * deriv }
    }
}

impl<S: Scalar> fmt::Display for Dual<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}ε", self.re, self.eps)
    }
}

impl<S: Scalar> PartialOrd for Dual<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self { re: self.re + o.re, eps: self.eps + o.eps }
    }
}

impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self { re: self.re - o.re, eps: self.eps - o.eps }
    }
}

impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self { re: self.re * o.re, eps: self.re * o.eps + self.eps * o.re }
    }
}

impl<S: Scalar> Div for Dual<S> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = S::one() / o.re;
        Self { re: self.re * inv, eps: (self.eps - self.re * inv * o.eps) * inv }
    }
}

impl<S: Scalar> Rem for Dual<S> {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        let q = (self.re / o.re).trunc();
        Self { re: self.re % o.re, eps: self.eps - q * o.eps }
    }
}

impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self { re: -self.re, eps: -self.eps }
    }
}

macro_rules! assign_op {
    ($tr:ident, $m:ident, $op:tt) => {
        impl<S: Scalar> $tr for Dual<S> {
            #[inline]
            fn $m(&mut self, o: Self) {
                *self = *self $op o;
            }
        }
    };
}
assign_op!(AddAssign, add_assign, +);
assign_op!(SubAssign, sub_assign, -);
assign_op!(MulAssign, mul_assign, *);
assign_op!(DivAssign, div_assign, /);
assign_op!(RemAssign, rem_assign, %);

impl<S: Scalar> Sum for Dual<S> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

impl<S: Scalar> Zero for Dual<S> {
    fn zero() -> Self {
        Self::constant(S::zero())
    }
    fn is_zero(&self) -> bool {
        self.re.is_zero() && self.eps.is_zero()
    }
}

impl<S: Scalar> One for Dual<S> {
    fn one() -> Self {
        Self::constant(S::one())
    }
}

impl<S: Scalar> Num for Dual<S> {
    type FromStrRadixErr = S::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        S::from_str_radix(s, radix).map(Self::constant)
    }
}

impl<S: Scalar> ToPrimitive for Dual<S> {
    fn to_i64(&self) -> Option<i64> {
        self.re.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.re.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        self.re.to_f64()
    }
}

impl<S: Scalar> FromPrimitive for Dual<S> {
    fn from_i64(n: i64) -> Option<Self> {
        S::from_i64(n).map(Self::constant)
    }
    fn from_u64(n: u64) -> Option<Self> {
        S::from_u64(n).map(Self::constant)
    }
    fn from_f64(n: f64) -> Option<Self> {
        S::from_f64(n).map(Self::constant)
    }
}

impl<S: Scalar> NumCast for Dual<S> {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        <S as NumCast>::from(n).map(Self::constant)
    }
}

impl<S: Scalar> Float for Dual<S> {
    fn nan() -> Self {
        Self::constant(S::nan())
    }
    fn infinity() -> Self {
        Self::constant(S::infinity())
    }
    fn neg_infinity() -> Self {
        Self::constant(S::neg_infinity())
    }
    fn neg_zero() -> Self {
        Self::constant(S::neg_zero())
    }
    fn min_value() -> Self {
        Self::constant(S::min_value())
    }
    fn min_positive_value() -> Self {
        Self::constant(S::min_positive_value())
    }
    fn max_value() -> Self {
        Self::constant(S::max_value())
    }
    fn is_nan(self) -> bool {
        self.re.is_nan() || self.eps.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.re.is_infinite() || self.eps.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }
    fn is_normal(self) -> bool {
        self.re.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.re.classify()
    }
    fn floor(self) -> Self {
        Self::constant(self.re.floor())
    }
    fn ceil(self) -> Self {
        Self::constant(self.re.ceil())
    }
    fn round(self) -> Self {
        Self::constant(self.re.round())
    }
    fn trunc(self) -> Self {
        Self::constant(self.re.trunc())
    }
    fn fract(self) -> Self {
        Self { re: self.re.fract(), eps: self.eps }
    }
    fn abs(self) -> Self {
        if self.re < S::zero() {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::constant(self.re.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.re.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.re.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Self::one() / self
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::one();
        }
        let v = self.re.powi(n);
        self.chain(v, S::of(n as f64) * self.re.powi(n - 1))
    }
    fn powf(self, n: Self) -> Self {
        // d(x^y) = y x^(y-1) dx + x^y ln(x) dy
        let v = self.re.powf(n.re);
        let dx = if self.eps.is_zero() {
            S::zero()
        } else {
            n.re * self.re.powf(n.re - S::one()) * self.eps
        };
        let dy = if n.eps.is_zero() {
            S::zero()
        } else {
            v * self.re.ln() * n.eps
        };
        Self { re: v, eps: dx + dy }
    }
    fn sqrt(self) -> Self {
        let v = self.re.sqrt();
        self.chain(v, S::one() / (v + v))
    }
    fn exp(self) -> Self {
        let v = self.re.exp();
        self.chain(v, v)
    }
    fn exp2(self) -> Self {
        let v = self.re.exp2();
        self.chain(v, v * S::of(std::f64::consts::LN_2))
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), S::one() / self.re)
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.chain(self.re.log2(), S::one() / (self.re * S::of(std::f64::consts::LN_2)))
    }
    fn log10(self) -> Self {
        self.chain(self.re.log10(), S::one() / (self.re * S::of(std::f64::consts::LN_10)))
    }
    fn max(self, other: Self) -> Self {
        if other.re > self.re || self.re.is_nan() {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if other.re < self.re || self.re.is_nan() {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self.re <= other.re {
            Self::zero()
        } else {
            self - other
        }
    }
    fn cbrt(self) -> Self {
        let v = self.re.cbrt();
        self.chain(v, S::one() / (S::of(3.0) * v * v))
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn tan(self) -> Self {
        let t = self.re.tan();
        self.chain(t, S::one() + t * t)
    }
    fn asin(self) -> Self {
        self.chain(self.re.asin(), S::one() / (S::one() - self.re * self.re).sqrt())
    }
    fn acos(self) -> Self {
        self.chain(self.re.acos(), -S::one() / (S::one() - self.re * self.re).sqrt())
    }
    fn atan(self) -> Self {
        self.chain(self.re.atan(), S::one() / (S::one() + self.re * self.re))
    }
    fn atan2(self, other: Self) -> Self {
        let d = self.re * self.re + other.re * other.re;
        Self {
            re: self.re.atan2(other.re),
            eps: (other.re * self.eps - self.re * other.eps) / d,
        }
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.chain(self.re.exp_m1(), self.re.exp())
    }
    fn ln_1p(self) -> Self {
        self.chain(self.re.ln_1p(), S::one() / (S::one() + self.re))
    }
    fn sinh(self) -> Self {
        self.chain(self.re.sinh(), self.re.cosh())
    }
    fn cosh(self) -> Self {
        self.chain(self.re.cosh(), self.re.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, S::one() - t * t)
    }
    fn asinh(self) -> Self {
        self.chain(self.re.asinh(), S::one() / (self.re * self.re + S::one()).sqrt())
    }
    fn acosh(self) -> Self {
        self.chain(self.re.acosh(), S::one() / (self.re * self.re - S::one()).sqrt())
    }
    fn atanh(self) -> Self {
        self.chain(self.re.atanh(), S::one() / (S::one() - self.re * self.re))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.re.integer_decode()
    }
}
