//! Command-line orchestration of the evaluation pipeline: plans, output
//! files, the scoring stages and the subcommand bodies behind `narrec`.

pub mod commands;
pub mod evaluate;
pub mod output;
pub mod plan;
