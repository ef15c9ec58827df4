//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type for attention maps, latents and losses.
///
/// Implemented for `f32` and `f64`. Guidance math is written once against
/// this trait; the toy pipeline and the gradient checks run in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + ScalarOperand + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; used for constants and RNG draws.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// Round to SCAT storage precision and widen back.
    fn storage_rounded(self) -> Self {
        Self::of(self.to_f32().expect("Scalar converts to f32") as f64)
    }

    fn half() -> Self {
        Self::of(0.5)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Index of the first maximal element. `None` for an empty slice.
pub fn argmax<T: Scalar>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn max_value<T: Scalar>(values: &[T]) -> Option<T> {
    argmax(values).map(|i| values[i])
}

pub fn min_value<T: Scalar>(values: &[T]) -> Option<T> {
    values.iter().copied().reduce(|a, b| if b < a { b } else { a })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), Some(1));
        assert_eq!(argmax::<f64>(&[]), None);
    }

    #[test]
    fn storage_rounding_is_f32_exact() {
        let x = 0.1f64;
        assert_eq!(x.storage_rounded(), 0.1f32 as f64);
        assert_eq!(0.1f32.storage_rounded(), 0.1f32);
    }
}
