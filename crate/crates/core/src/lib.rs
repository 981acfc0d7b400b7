//! Composition-aware visual search.
//!
//! Learns an embedding of backbone feature maps whose dot products track the
//! overlap of categorized object layouts, and serves exact top-k retrieval for
//! box-and-category canvas queries.

pub mod autodiff;
pub mod composition;
pub mod cten;
pub mod dataset;
pub mod error;
pub mod index;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
#[cfg(feature = "service")]
pub mod service;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
