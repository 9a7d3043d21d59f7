//! Bootstrap intervals, repeated-measures ANOVA and multiple-testing
//! correction.

pub mod anova;
pub mod bootstrap;
pub mod special;

use thiserror::Error;

pub use anova::{bonferroni_threshold, rm_anova, AnovaResult};
pub use bootstrap::{bootstrap_ci, BootstrapConfig, Interval};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("input is empty")]
    Empty,
    #[error("confidence level {0} must lie in (0, 1)")]
    InvalidLevel(f64),
    #[error("at least one bootstrap resample is required")]
    NoResamples,
    #[error("columns have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("row {row} has {found} cells, expected {expected}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("cell ({row}, {col}) is missing or not finite")]
    MissingCell { row: usize, col: usize },
    #[error("repeated-measures ANOVA needs at least 2 subjects and 2 treatments, got {subjects}×{treatments}")]
    TooSmall { subjects: usize, treatments: usize },
    #[error("number of tests must be at least 1")]
    NoTests,
}

/// Arithmetic mean that returns the common value exactly when all inputs
/// are equal.
pub fn mean(values: &[f64]) -> f64 {
    match values {
        [] => f64::NAN,
        [first, rest @ ..] if rest.iter().all(|v| v == first) => *first,
        _ => values.iter().sum::<f64>() / values.len() as f64,
    }
}
