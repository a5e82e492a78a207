//! Scalar abstraction shared by the numerical modules.
//!
//! Everything that touches gradients, distances or losses is written against
//! [`Real`], so the same code runs in `f32` and `f64`. The defense pipeline
//! and the CLI pin `f64` through the aliases in the crate root; `f32` input
//! is accepted on ingestion and widened.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar usable throughout the crate.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal. Never fails for finite inputs on `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Euclidean distance. Symmetric bit-for-bit, since `(a-b)^2 == (b-a)^2`
/// exactly in IEEE arithmetic.
pub fn l2_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| {
            let d = x - y;
            acc + d * d
        })
        .sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`; `None` if either vector has zero norm.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Option<T> {
    let na = norm(a);
    let nb = norm(b);
    if na == T::zero() || nb == T::zero() || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    let c = dot(a, b) / (na * nb);
    Some(c.max(-T::one()).min(T::one()))
}

pub fn all_finite<T: Real>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}
