//! Library side of the `vitrecon` command-line tool.

pub mod commands;
pub mod config;
