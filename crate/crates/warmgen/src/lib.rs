//! Files, command line and experiment harness around `warmgen-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod records;
pub mod run;

pub use error::{Error, Result};
