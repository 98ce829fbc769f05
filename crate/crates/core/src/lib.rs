pub mod autograd;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod nets;
pub mod optim;
pub mod params;
pub mod losses;
pub mod dataset;
pub mod fixture;
pub mod metrics;
pub mod checkpoint;
pub mod trainer;
pub mod recognition;
pub mod pipeline;
pub mod cli;
pub mod gradcheck;
