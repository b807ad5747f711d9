pub mod attacks;
pub mod cli;
pub mod error;
pub mod fingerprint;
pub mod imaging;
pub mod inversion;
pub mod io;
pub mod keying;
pub mod localize;
pub mod pipeline;
pub mod predictor;
pub mod sampler;
pub mod schedule;
pub mod stats;
pub mod tensor;
pub mod theory;
pub mod verify;

pub use error::{Error, Result};
