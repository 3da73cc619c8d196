//! Library side of the `mosnet` command-line tool.

pub mod commands;
pub mod config;
pub mod error;
