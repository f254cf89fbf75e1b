//! Desk-scale laboratory contrasting label-synchronous (transformer) and
//! frame-synchronous (continuous integrate-and-fire) speech recognition.

pub mod cif;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod instrument;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod san;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use exec::Execution;
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
