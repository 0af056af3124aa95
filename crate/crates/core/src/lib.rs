//! Numeric and modelling core for visual-prompt planning: a small
//! define-by-run autodiff engine, a word-level tokenizer, a decoder-only
//! transformer that accepts token ids and raw embeddings in one sequence,
//! the observation encoder that turns images into soft prompts, and the
//! interleaved context builder.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below pick
//! the precision. `f32` is used for training, `f64` for gradient checks.

pub mod context;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kv;
pub mod lm;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod vision;
pub mod vocab;

pub use error::{CoreError, Result};
pub use graph::{ConvGeometry, Graph, Reduction, Var};
pub use kv::KvCache;
pub use params::{AdamHyper, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
