pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod fsqae;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod translator;

pub use error::{Error, Result};
pub use tensor::Tensor;
