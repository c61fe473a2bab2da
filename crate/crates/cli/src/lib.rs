//! Batch command line and HTTP service over the `cdemapper-core` engine.
//! Both are thin shells: identical inputs give identical mapping results.

pub mod cli;
pub mod config;
pub mod jobs;
pub mod server;

pub use cli::run;
