//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Real scalar type the whole crate is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into this scalar type.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tanh-form GELU.
    fn gelu(self) -> Self {
        // 0.5·x·(1 + tanh u) = x·σ(2u)
        self * (Self::of(2.0) * gelu_inner(self)).sigmoid()
    }

    fn gelu_grad(self) -> Self {
        let a = Self::of(0.044_715);
        let s = (Self::of(2.0) * gelu_inner(self)).sigmoid();
        let dinner = Self::of(GELU_C) * (Self::one() + Self::of(3.0) * a * self * self);
        s + Self::of(2.0) * self * s * (Self::one() - s) * dinner
    }

    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu_inner<T: Scalar>(x: T) -> T {
    T::of(GELU_C) * (x + T::of(0.044_715) * x * x * x)
}

impl Scalar for f32 {}
impl Scalar for f64 {}
