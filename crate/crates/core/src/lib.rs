pub mod decoder;
pub mod encoders;
pub mod error;
pub mod exec;
pub mod harness;
pub mod masking;
pub mod metrics;
pub mod numerics;
pub mod rescoring;
pub mod transducer;

pub use error::{Error, Result};
