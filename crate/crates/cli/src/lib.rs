//! Command-line front end: CSV fitting and selection, Monte Carlo runs and
//! efficiency tables.

pub mod args;
pub mod commands;
pub mod data;
pub mod error;
pub mod output;
