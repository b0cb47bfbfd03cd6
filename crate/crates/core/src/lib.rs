//! Split inference between a client (head sub-model) and a server (tail
//! sub-model), with compressed feature-tensor transport and latency modelling.
//!
//! The crate is layered bottom-up: [`tensor`] and [`graph`] define models,
//! [`exec`] runs them, [`zoo`] builds the reference MicroResNet and its
//! synthetic data, [`codec`] compresses cut tensors, [`transport`] moves them,
//! and [`analyze`] / [`lab`] score split points and predict latency.

pub mod analyze;
pub mod codec;
pub mod error;
pub mod exec;
pub mod graph;
pub mod image;
pub mod lab;
pub mod modelfile;
pub mod rng;
pub mod tensor;
pub mod transport;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::ModelGraph;
pub use tensor::Tensor;
