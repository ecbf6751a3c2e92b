use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point scalar the numerical core is written against.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or hyperparameter.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Logistic function kept strictly inside (0, 1).
///
/// For |x| beyond roughly 37 (f64) the textbook formula rounds to exactly 0 or
/// 1; the result is clamped to the nearest representable interior value.
pub fn logistic<T: Scalar>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let upper = one - T::epsilon() / T::of(2.0);
    y.max(T::min_positive_value()).min(upper)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_stays_open() {
        assert_eq!(logistic(0.0f64), 0.5);
        assert!(logistic(1e4f64) < 1.0);
        assert!(logistic(-1e4f64) > 0.0);
        assert!(logistic(100.0f32) < 1.0);
        assert!((logistic(2.0f64) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-16);
    }

    #[test]
    fn norm_and_dot() {
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]), 11.0);
        assert_eq!(norm(&[3.0f32, 4.0]), 5.0);
    }
}
