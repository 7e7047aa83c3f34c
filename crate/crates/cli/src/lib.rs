//! Configuration, orchestration and file formats for the `dispersim`
//! experiment runner.

pub mod config;
pub mod runner;
pub mod snapshot;
