//! Graph learning laboratory: signed messages, degree corrections and
//! decaying aggregation on a small reverse-mode autodiff core, together
//! with closed-form propagation dynamics and Monte-Carlo oracles that
//! check them.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use graph::{build_graph, Graph, Scheme, Sign};
pub use tensor::Tensor;
