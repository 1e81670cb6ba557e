//! Command implementations behind the `spanet` binary.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
