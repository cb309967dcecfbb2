pub mod audit;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod cross_modal;
pub mod data;
pub mod debias;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod nn;
pub mod params;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
