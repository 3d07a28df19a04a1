//! File formats, configuration and the `npa` command line on top of
//! `npa-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod container;
pub mod error;
pub mod formats;
