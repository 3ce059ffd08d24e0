pub mod analytics;
pub mod config;
pub mod data;
pub mod eval;
pub mod error;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
pub use rng::Rng;
pub use tensor::{no_grad, Tensor};
