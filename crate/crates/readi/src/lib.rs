//! Variant store, file formats, experiment pipelines and the command line
//! for the `readi-core` detector.

pub mod bench;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod report;
pub mod store;
pub mod storedir;

pub use error::{Error, Result};
