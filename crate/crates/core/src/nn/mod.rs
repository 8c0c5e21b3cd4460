//! Minimal tensor autodiff used by the denoiser, the text embedder and the
//! dual-control module.

mod adam;
mod graph;
mod params;
mod real;

pub use adam::{Adam, AdamState};
pub use graph::{Graph, Var};
pub use params::{Init, ParamGrads, ParamId, ParamStore};
pub use real::{gemm_into, matmul, MatRef, Real};
