//! Graph language model in which every token is a node, every ordered node
//! pair is an edge carrying a learnable affine map, and the next token is the
//! candidate node receiving the highest signal energy.
//!
//! Modules follow the data flow: [`model`] holds parameters, [`signal`]
//! propagates signals along a sequence, [`predict`] scores candidates,
//! [`generate`] decodes incrementally, [`train`] learns by manual backprop,
//! [`sparsity`] picks dedicated edges from bigram counts, [`corpus`] handles
//! text and [`checkpoint`] persists everything.

pub mod bench;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod generate;
pub mod model;
pub mod predict;
pub mod real;
pub mod signal;
pub mod sparsity;
pub mod train;

pub use error::{Error, Result};
pub use model::{EdgeId, ModelConfig, ParamCount, PredictionMode, SiFuModel};
pub use real::Real;
