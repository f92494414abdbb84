//! Command-line front end: subcommands, the ablation harness and report joins.

pub mod ablate;
pub mod app;
pub mod report;
