//! Adversarial image repurposing detection.
//!
//! Packages pair a unit-norm image embedding with a structured metadata
//! identity. A reference dataset of verified packages is indexed with an
//! inverted-file product quantizer ([`vecindex`]); a counterfeiter
//! ([`counterfeiter`]) fabricates convincing metadata from similar images of
//! other identities, and a detector ([`detector`]) learns to reject it by
//! comparing the query against evidence retrieved by image and by metadata.
//! The two are trained against each other in [`training`] and compared with
//! non-learning baselines in [`evaluation`].

pub mod counterfeiter;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod neural;
pub mod synthbench;
pub mod training;
pub mod vecindex;

mod binio;

pub use error::{AirdError, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used everywhere randomness is needed.
pub type Rng = ChaCha8Rng;

pub(crate) fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dot product of two `f32` slices, accumulated in `f64`.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Squared Euclidean distance, accumulated in `f64`.
#[inline]
pub fn l2_sq(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}
