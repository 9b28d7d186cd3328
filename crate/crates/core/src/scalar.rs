//! The floating-point abstraction every numeric routine in the crate is written against.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// A real number type usable for feature values, impurities and importance scores.
///
/// Implemented for `f32` and `f64`. Split search, impurity bookkeeping and the
/// importance measures are generic over it; the crate root exposes `f64`
/// aliases for the common case.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + FromStr
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts a count without going through a fallible path.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable as a float")
    }

    /// Converts an `f64` literal or statistic, panicking only for types that cannot hold it.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Relative slack used when comparing impurity decreases computed along
/// different arithmetic routes: `1024 * epsilon`, about `2.3e-13` for `f64`.
pub fn comparison_slack<T: Scalar>() -> T {
    T::epsilon() * T::lit(1024.0)
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// 1-based ranks by descending score, ties resolved towards the lower index.
pub(crate) fn descending_ranks<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0; scores.len()];
    for (pos, idx) in order.into_iter().enumerate() {
        ranks[idx] = pos + 1;
    }
    ranks
}

pub(crate) fn mean<T: Scalar>(values: &[T]) -> T {
    values.iter().copied().sum::<T>() / T::from_count(values.len())
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub(crate) fn sample_std<T: Scalar>(values: &[T]) -> T {
    if values.len() < 2 {
        return T::zero();
    }
    let m = mean(values);
    let ss: T = values.iter().map(|&v| (v - m) * (v - m)).sum();
    (ss / T::from_count(values.len() - 1)).sqrt()
}

pub(crate) fn median<T: Scalar>(values: &[T]) -> T {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / T::lit(2.0)
    }
}
