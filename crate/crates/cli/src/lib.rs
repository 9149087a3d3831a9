//! Command-line driver and read-only HTTP service for REC-CBM models.

pub mod app;
pub mod config;
pub mod manifest;
pub mod service;

pub use crate::app::{run, Cli, Command};
pub use crate::config::RunConfig;
pub use crate::manifest::RunManifest;
