//! Command-line front end: model files, training configs and subcommands.

pub mod commands;
pub mod config;
pub mod modelfile;
