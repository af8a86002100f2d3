pub mod baseline;
pub mod channel;
pub mod cli;
pub mod data;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod surrogate;
pub mod transceiver;

pub use error::{Error, Result};
