//! Library side of the `msll` command-line tool.

pub mod commands;
pub mod config;
pub mod report;
pub mod summary;
