pub mod advantage;
pub mod checkpoint;
pub mod critic;
pub mod data;
pub mod error;
pub mod experiment;
pub mod needs;
pub mod policy;
pub mod ranking;
pub mod reward;
pub mod stats;

pub use error::{Error, Result};
