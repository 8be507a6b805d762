//! Floating point abstraction shared by every solver in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the solvers are generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub fn mean<S: Scalar>(xs: &[S]) -> S {
    if xs.is_empty() {
        return S::zero();
    }
    xs.iter().copied().sum::<S>() / S::from_usize_lossy(xs.len())
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se<S: Scalar>(xs: &[S]) -> (S, S) {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return (m, S::zero());
    }
    let var = xs.iter().map(|&x| (x - m) * (x - m)).sum::<S>() / S::from_usize_lossy(n - 1);
    (m, (var / S::from_usize_lossy(n)).sqrt())
}

pub fn std_dev<S: Scalar>(xs: &[S]) -> S {
    let n = xs.len();
    if n < 2 {
        return S::zero();
    }
    let m = mean(xs);
    (xs.iter().map(|&x| (x - m) * (x - m)).sum::<S>() / S::from_usize_lossy(n - 1)).sqrt()
}
