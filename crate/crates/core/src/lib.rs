//! DPCNet: a dual-path image deraining network.
//!
//! The crate carries its own small reverse-mode tensor engine
//! ([`graph`], [`kernels`]) and builds the network, losses, metrics, data
//! pipeline and training loop on top of it.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use params::{Bindings, ParamId, ParamStore, DEFAULT_SEED};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
