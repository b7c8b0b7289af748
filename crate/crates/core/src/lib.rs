//! Decompose a vision transformer into several small models, distill them
//! per class partition, fuse them with an activation-free aggregation module,
//! and evaluate the resulting deployment on simulated edge devices.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod decompose;
pub mod distill;
pub mod ensemble;
pub mod error;
pub mod optim;
pub mod persist;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
