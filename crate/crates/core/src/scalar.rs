//! Scalar abstraction shared by the similarity, scoring and evaluation code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type used for embeddings and relevance scores: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used by scorers that compute in double precision.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Total order used for ranking; NaN sorts below every number.
    fn rank_cmp(&self, other: &Self) -> std::cmp::Ordering {
        match (self.is_nan(), other.is_nan()) {
            (true, true) => std::cmp::Ordering::Equal,
            (true, false) => std::cmp::Ordering::Less,
            (false, true) => std::cmp::Ordering::Greater,
            (false, false) => self.partial_cmp(other).expect("non-NaN floats are ordered"),
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product of two equally sized slices.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

/// Scales `v` to unit L2 norm in place. Zero vectors are left untouched.
pub fn normalize_in_place<S: Scalar>(v: &mut [S]) {
    let norm = dot(v, v).sqrt();
    if norm > S::zero() && norm.is_finite() {
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
}

/// Cosine similarity; zero when either side has zero norm.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> S {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == S::zero() || nb == S::zero() {
        return S::zero();
    }
    dot(a, b) / (na * nb)
}
