//! Small deterministic dense linear algebra.

mod matrix;
mod rng;
mod svd;

pub use matrix::{dot, matvec, Matrix, Vector};
pub use rng::{seeded_uniform, Rng, Stream};
pub use svd::{svd, Svd};
