//! One-way repeated-measures ANOVA (subjects × treatments) and Bonferroni
//! correction.

use serde::{Deserialize, Serialize};

use super::special::f_sf;
use super::StatsError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f_value: f64,
    pub p_value: f64,
    pub df_num: usize,
    pub df_den: usize,
    pub ss_treatment: f64,
    pub ss_subjects: f64,
    pub ss_error: f64,
}

/// Within-subjects one-way ANOVA. `matrix[i][j]` is subject `i` under
/// treatment `j`.
///
/// The total sum of squares is split into subject, treatment and error
/// parts; `F = MS_treatment / MS_error` with `(k−1, (n−1)(k−1))` degrees of
/// freedom. No treatment variance gives `F = 0`; treatment variance with no
/// error variance gives `F = ∞`.
pub fn rm_anova(matrix: &[Vec<f64>]) -> Result<AnovaResult, StatsError> {
    let n = matrix.len();
    let k = matrix.first().map(Vec::len).unwrap_or(0);
    for (i, row) in matrix.iter().enumerate() {
        if row.len() != k {
            return Err(StatsError::Ragged {
                row: i,
                expected: k,
                found: row.len(),
            });
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(StatsError::MissingCell { row: i, col: j });
        }
    }
    if n < 2 || k < 2 {
        return Err(StatsError::TooSmall {
            subjects: n,
            treatments: k,
        });
    }

    let nf = n as f64;
    let kf = k as f64;
    let col_means: Vec<f64> = (0..k)
        .map(|j| matrix.iter().map(|row| row[j]).sum::<f64>() / nf)
        .collect();
    let row_means: Vec<f64> = matrix.iter().map(|row| row.iter().sum::<f64>() / kf).collect();
    let grand = col_means.iter().sum::<f64>() / kf;

    let treatments_equal = col_means.iter().all(|m| *m == col_means[0]);
    let ss_treatment = if treatments_equal {
        0.0
    } else {
        nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>()
    };
    let ss_subjects = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_total: f64 = matrix
        .iter()
        .flat_map(|row| row.iter())
        .map(|v| (v - grand).powi(2))
        .sum();
    let ss_error = (ss_total - ss_subjects - ss_treatment).max(0.0);

    let df_num = k - 1;
    let df_den = (n - 1) * (k - 1);
    let f_value = if ss_treatment == 0.0 {
        0.0
    } else if ss_error == 0.0 {
        f64::INFINITY
    } else {
        (ss_treatment / df_num as f64) / (ss_error / df_den as f64)
    };
    Ok(AnovaResult {
        f_value,
        p_value: f_sf(f_value, df_num as f64, df_den as f64),
        df_num,
        df_den,
        ss_treatment,
        ss_subjects,
        ss_error,
    })
}

/// Per-test significance level after Bonferroni correction.
pub fn bonferroni_threshold(alpha: f64, m: usize) -> Result<f64, StatsError> {
    if m == 0 {
        return Err(StatsError::NoTests);
    }
    Ok(alpha / m as f64)
}
