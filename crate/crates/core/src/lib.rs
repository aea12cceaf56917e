pub mod constructive;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod instance;
pub mod nn;
pub mod pipeline;
pub mod regional;
pub mod rng;
pub mod subseq;
pub mod two_opt;

pub use decode::DecodeMode;
pub use error::{Error, Result};
