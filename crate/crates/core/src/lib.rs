pub mod error;
pub mod kernels;
pub mod ordinal;

pub use error::{Error, Result};
pub mod data;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod quadrature;
pub mod reproduction;
pub mod simulation;
pub mod svi;
