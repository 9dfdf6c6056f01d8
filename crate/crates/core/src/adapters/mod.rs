//! Fine-tuning methods as adapters over a frozen linear layer `o = W₀x + β₀`.
//!
//! Every adapter starts as a zero shift (the adapted layer equals the frozen
//! one), has an exact closed-form backward pass, and can be merged back into
//! a plain `(W_ft, β_ft)` pair.

mod kind;
mod mora;
mod state;

pub use kind::{flop_count, mora_rank, param_count, AdapterKind, FlopCount, Method, NormGradient};
pub use mora::{GroupLayout, RopeLayout};
pub use state::{make_adapter, AdapterState, Grad, GradBundle, InitStreams, ParamMut, ParamRef, VERA_DVEC_INIT};

use crate::error::Result;
use crate::linalg::{Matrix, Vector};

pub fn forward(a: &AdapterState, w0: &Matrix, beta0: &Vector, x: &Vector) -> Result<Vector> {
    a.forward(w0, beta0, x)
}

pub fn backward(a: &AdapterState, w0: &Matrix, beta0: &Vector, x: &Vector, g_out: &Vector) -> Result<GradBundle> {
    a.backward(w0, beta0, x, g_out)
}

pub fn merge(a: &AdapterState, w0: &Matrix, beta0: &Vector) -> Result<(Matrix, Vector)> {
    a.merge(w0, beta0)
}

#[cfg(test)]
mod tests;
