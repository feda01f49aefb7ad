//! Dense arrays with tape-based reverse-mode differentiation.

mod array;
pub mod attention;
mod graph;
mod params;
mod real;

pub use array::Array;
pub use attention::{masked_softmax_attention, AttentionMask};
pub use graph::{rms_norm, Gradients, Graph, RotaryTable, Var};
pub use params::{ParamId, ParamStore};
pub use real::Real;
