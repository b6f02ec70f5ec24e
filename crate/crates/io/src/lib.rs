//! File formats and command line for the `hnfnet` engine.

pub mod cli;
pub mod config;
pub mod error;
mod fsutil;
pub mod report;
pub mod volume;
pub mod weights;

pub use error::{IoError, IoResult};
pub use fsutil::write_atomic;
