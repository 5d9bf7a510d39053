//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the dynamic programs, losses and scorers are generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// Absolute slack used when deciding that two DP scores tie.
    fn tie_slack(scale: Self) -> Self {
        Self::epsilon() * Self::lit(1e4) * scale.abs().max(Self::one())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable `log Σ exp(x)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp<S: Scalar>(xs: impl IntoIterator<Item = S> + Clone) -> S {
    let m = xs
        .clone()
        .into_iter()
        .fold(S::neg_infinity(), |acc, x| acc.max(x));
    if m == S::neg_infinity() {
        return m;
    }
    if m == S::infinity() {
        return m;
    }
    let s = xs.into_iter().fold(S::zero(), |acc, x| acc + (x - m).exp());
    m + s.ln()
}
