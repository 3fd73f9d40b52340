//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point: `f32` or `f64`.
///
/// Verification and training run in `f64`; `f32` is used for checkpoint
/// storage and for cheap audit passes where only op counts matter.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts a literal. Every `f64` is representable (possibly rounded) in
    /// the supported scalar types.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `tanh`-approximated GELU.
    #[inline]
    fn gelu(self) -> Self {
        let c = Self::of(0.797_884_560_802_865_4);
        let k = Self::of(0.044_715);
        let half = Self::of(0.5);
        half * self * (Self::one() + (c * (self + k * self * self * self)).tanh())
    }

    #[inline]
    fn gelu_grad(self) -> Self {
        let c = Self::of(0.797_884_560_802_865_4);
        let k = Self::of(0.044_715);
        let half = Self::of(0.5);
        let x = self;
        let u = c * (x + k * x * x * x);
        let t = u.tanh();
        let du = c * (Self::one() + Self::of(3.0) * k * x * x);
        half * (Self::one() + t) + half * x * (Self::one() - t * t) * du
    }

    #[inline]
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    /// `ln(1 + e^x)` without overflow.
    #[inline]
    fn softplus(self) -> Self {
        let hi = Self::of(30.0);
        if self > hi {
            self
        } else if self < -hi {
            self.exp()
        } else {
            self.exp().ln_1p()
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(1000.0f64.softplus(), 1000.0);
        assert!((-1000.0f64).softplus() >= 0.0);
        assert!((0.0f64.softplus() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = ((x + h).gelu() - (x - h).gelu()) / (2.0 * h);
            assert!((fd - x.gelu_grad()).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn sigmoid_symmetry() {
        for &x in &[-40.0f64, -1.0, 0.0, 3.0] {
            assert!((x.sigmoid() + (-x).sigmoid() - 1.0).abs() < 1e-15);
        }
    }
}
