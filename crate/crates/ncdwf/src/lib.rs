//! File formats, configuration and the experiment pipeline around
//! `ncdwf-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
