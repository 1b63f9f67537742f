//! Scalar abstraction shared by every numerical kernel in the crate.
//!
//! All models, paths and solvers are generic over [`Real`], which is
//! implemented for `f32` and `f64`. Closed-form hedging comparators only need
//! field arithmetic and additionally accept exact rationals.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar usable throughout the engine.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Panics only if the target type cannot hold
    /// finite values, which never happens for `f32`/`f64`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Exponential variate with unit mean.
    fn standard_exp<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Uniform variate on `[0, 1)`.
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                <StandardNormal as Distribution<$t>>::sample(&StandardNormal, rng)
            }

            #[inline]
            fn standard_exp<R: Rng + ?Sized>(rng: &mut R) -> Self {
                <Exp1 as Distribution<$t>>::sample(&Exp1, rng)
            }

            #[inline]
            fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.random::<$t>()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Four-point Gauss-Legendre rule on `[-1, 1]`: `(node, weight)` pairs.
pub(crate) const GAUSS_LEGENDRE_4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

/// Integrates `f` over `[a, b]` with the four-point Gauss-Legendre rule.
pub(crate) fn gauss_legendre_4<T: Real, F: FnMut(T) -> T>(a: T, b: T, mut f: F) -> T {
    let half = (b - a) * T::lit(0.5);
    let mid = (a + b) * T::lit(0.5);
    GAUSS_LEGENDRE_4
        .iter()
        .map(|&(x, w)| T::lit(w) * f(mid + half * T::lit(x)))
        .sum::<T>()
        * half
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se<T: Real>(xs: &[T]) -> (T, T) {
    let n = xs.len();
    if n == 0 {
        return (T::nan(), T::nan());
    }
    let nt = T::from_usize(n).unwrap();
    let mean = xs.iter().copied().sum::<T>() / nt;
    if n < 2 {
        return (mean, T::zero());
    }
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>()
        / T::from_usize(n - 1).unwrap();
    (mean, (var / nt).sqrt())
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(bound = "T: Real")]
pub struct McEstimate<T> {
    pub mean: T,
    pub se: T,
    pub samples: usize,
}

impl<T: Real> McEstimate<T> {
    pub fn from_samples(xs: &[T]) -> Self {
        let (mean, se) = mean_and_se(xs);
        Self {
            mean,
            se,
            samples: xs.len(),
        }
    }

    /// True when `|mean - target| <= k * se + slack`.
    pub fn agrees_with(&self, target: T, k: T, slack: T) -> bool {
        (self.mean - target).abs() <= k * self.se + slack
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_cubics_exactly() {
        let v: f64 = gauss_legendre_4(0.0, 2.0, |x| x * x * x - x + 1.0);
        assert!((v - (4.0 - 2.0 + 2.0)).abs() < 1e-14);
    }

    #[test]
    fn gauss_legendre_exponential() {
        let v: f64 = gauss_legendre_4(0.0, 0.5, |x| (-x).exp());
        assert!((v - (1.0 - (-0.5f64).exp())).abs() < 1e-9);
    }

    #[test]
    fn mean_se_of_constant_is_zero_se() {
        let (m, se) = mean_and_se(&[2.0f32; 10]);
        assert_eq!(m, 2.0);
        assert_eq!(se, 0.0);
    }
}
