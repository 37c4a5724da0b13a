//! Command-line orchestration of the UNIONS toy pipeline.

pub mod commands;
pub mod config;
pub mod pipeline;
