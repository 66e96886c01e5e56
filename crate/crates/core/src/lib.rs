//! Distributed Mahalanobis distance metric learning.
//!
//! Learns a low-rank factor `L` (with `M = L^T L`) from similar/dissimilar
//! pair supervision by asynchronous mini-batch SGD: workers compute gradients
//! against local parameter copies and synchronize through a centralized
//! parameter server. A desk-scale projected-gradient solver for the original
//! constrained formulation serves as a correctness oracle, and the eval
//! module measures pair-classification quality and scaling behavior.

pub mod baseline;
pub mod data;
pub mod error;
pub mod eval;
pub mod metric;
pub mod model_io;
pub mod protocol;
pub mod server;
pub mod worker;

pub use error::{Error, Result};
pub use metric::{Dataset, GradientDelta, Hyperparams, MetricFactor, PairSet};
