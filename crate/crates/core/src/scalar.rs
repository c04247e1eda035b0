//! Floating-point abstraction shared by the numerical modules.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used by the models, metrics and samplers.
///
/// Implemented for `f32` and `f64`. Hyperparameters and file formats stay in
/// `f64`; conversions go through [`Scalar::of`] and [`Scalar::f64`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + Sum + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar type.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Tolerance used when checking that stored logits agree with probabilities.
    fn consistency_tol() -> Self {
        Self::of(1e-9).max(Self::epsilon() * Self::of(8.0))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logistic function, evaluated without overflow for large `|z|`.
#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)`.
#[inline]
pub fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Inverse of [`sigmoid`]. The argument is clamped to `[eps, 1 - eps]` so the
/// result stays finite for saturated probabilities.
#[inline]
pub fn logit<T: Scalar>(p: T) -> T {
    let eps = T::epsilon();
    let p = p.max(eps).min(T::one() - eps);
    (p / (T::one() - p)).ln()
}

/// Mean computed incrementally. Exact for constant inputs, which keeps
/// bin confidences equal to their members when all members are equal.
pub(crate) fn running_mean<T: Scalar>(values: impl IntoIterator<Item = T>) -> T {
    let mut mean = T::zero();
    for (k, v) in values.into_iter().enumerate() {
        mean = mean + (v - mean) / T::of_usize(k + 1);
    }
    mean
}
