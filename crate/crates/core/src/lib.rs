//! Embedded heterogeneous attention decoder for synchronized two-language
//! captioning of region features.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure
//! computation: the tensor engine with reverse-mode differentiation, the
//! attention primitives, the heterogeneous attention blocks (MHCA, HARN, HCA),
//! the bilingual decoder, the two training stages, the caption metrics and the
//! synthetic corpus generator. File formats and the command-line driver live
//! in the `ehat` crate.

#![no_std]
#![forbid(unsafe_code)]
// graph-building functions take the graph, the store, parameters and several inputs
#![allow(clippy::too_many_arguments)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod corpus;
pub mod decoder;
pub mod ehat;
mod error;
pub mod gradcheck;
pub mod graph;
mod math;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use params::ParameterStore;
pub use rng::RngStream;
pub use tensor::Tensor;
