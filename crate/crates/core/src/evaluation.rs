//! Ranking metrics at cut-off 10, macro aggregation, inter-list diversity
//! and release-year distributions.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GoldSet, MovieId};
use crate::matching::MatchOutcome;
use crate::parsing::ParsedList;
use crate::stats::bootstrap::{bootstrap_ci, bootstrap_ci_columns, BootstrapConfig, Interval};
use crate::stats::{mean, StatsError};

/// Cut-off `k` of every metric.
pub const CUTOFF: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("gold set of `{0}` is empty")]
    EmptyGold(String),
    #[error("list of {0} entries exceeds the cut-off of {CUTOFF}")]
    ListTooLong(usize),
    #[error("no scores to aggregate")]
    Empty,
    #[error("diversity needs at least 2 repetitions per submission, found {0}")]
    TooFewRepetitions(usize),
    #[error("median selection needs an odd number of repetitions, got {0}; choose a repetition explicitly")]
    EvenRepetitions(usize),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Metrics for one request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ndcg: f64,
    pub n_hits: usize,
    pub gold_size: usize,
    pub list_len: usize,
    /// Hits over the returned list length instead of the fixed cut-off.
    pub precision_by_length: f64,
}

impl RequestScore {
    /// Score of an invalid or empty response.
    pub fn zero(gold_size: usize) -> Self {
        Self {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            ndcg: 0.0,
            n_hits: 0,
            gold_size,
            list_len: 0,
            precision_by_length: 0.0,
        }
    }
}

/// `1 / log2(rank + 1)` for a 1-based rank.
pub fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// DCG of a perfect list for a gold set of the given size.
pub fn ideal_dcg(gold_size: usize) -> f64 {
    (1..=gold_size.min(CUTOFF)).map(discount).sum()
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Scores a ranked list of optional ids against a gold set. Ids repeated
/// in the list count once, at their first rank.
pub fn score_ranked(ids: &[Option<MovieId>], gold: &GoldSet) -> Result<RequestScore, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold(gold.submission_id.clone()));
    }
    if ids.len() > CUTOFF {
        return Err(EvalError::ListTooLong(ids.len()));
    }
    let mut seen = HashSet::new();
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, id) in ids.iter().enumerate() {
        let Some(id) = id else { continue };
        if gold.contains(id.as_str()) && seen.insert(id) {
            hits += 1;
            dcg += discount(pos + 1);
        }
    }
    let precision = hits as f64 / CUTOFF as f64;
    let recall = hits as f64 / gold.len() as f64;
    Ok(RequestScore {
        precision,
        recall,
        f1: harmonic_mean(precision, recall),
        ndcg: dcg / ideal_dcg(gold.len()),
        n_hits: hits,
        gold_size: gold.len(),
        list_len: ids.len(),
        precision_by_length: if ids.is_empty() { 0.0 } else { hits as f64 / ids.len() as f64 },
    })
}

/// Precision, Recall, F1 and NDCG at 10 for one matched response.
pub fn score_request(outcome: &MatchOutcome, gold: &GoldSet) -> Result<RequestScore, EvalError> {
    score_ranked(&outcome.ids, gold)
}

/// Highest Recall@10 reachable for a gold set of this size.
pub fn recall_cap(gold_size: usize) -> f64 {
    gold_size.min(CUTOFF) as f64 / gold_size as f64
}

/// F1@10 of a perfect list for a gold set of this size.
pub fn f1_cap(gold_size: usize) -> f64 {
    harmonic_mean(gold_size.min(CUTOFF) as f64 / CUTOFF as f64, recall_cap(gold_size))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapSummary {
    pub n: usize,
    pub mean_gold_size: f64,
    pub mean_recall_cap: f64,
    pub mean_f1_cap: f64,
}

/// Mean per-request recall and F1 ceilings over non-empty gold sets.
pub fn upper_bounds<'a>(gold: impl IntoIterator<Item = &'a GoldSet>) -> CapSummary {
    let sizes: Vec<usize> = gold.into_iter().map(GoldSet::len).filter(|&n| n > 0).collect();
    let n = sizes.len();
    let avg = |f: &dyn Fn(usize) -> f64| sizes.iter().map(|&s| f(s)).sum::<f64>() / n as f64;
    CapSummary {
        n,
        mean_gold_size: avg(&|s| s as f64),
        mean_recall_cap: avg(&recall_cap),
        mean_f1_cap: avg(&f1_cap),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl MetricSummary {
    fn new(mean: f64, ci: Interval) -> Self {
        Self {
            mean,
            ci_low: ci.low,
            ci_high: ci.high,
        }
    }

    pub fn interval(&self) -> Interval {
        Interval {
            low: self.ci_low,
            high: self.ci_high,
        }
    }
}

/// Macro averages with bootstrapped intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateScore {
    pub n: usize,
    pub precision: MetricSummary,
    pub recall: MetricSummary,
    pub f1: MetricSummary,
    pub ndcg: MetricSummary,
}

/// Unweighted means over requests. All four intervals come from the same
/// resamples of the request set.
pub fn macro_average(scores: &[RequestScore], config: &BootstrapConfig) -> Result<AggregateScore, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let column = |f: fn(&RequestScore) -> f64| scores.iter().map(f).collect::<Vec<f64>>();
    let p = column(|s| s.precision);
    let r = column(|s| s.recall);
    let f = column(|s| s.f1);
    let n = column(|s| s.ndcg);
    let ci = bootstrap_ci_columns(&[&p, &r, &f, &n], config)?;
    Ok(AggregateScore {
        n: scores.len(),
        precision: MetricSummary::new(mean(&p), ci[0]),
        recall: MetricSummary::new(mean(&r), ci[1]),
        f1: MetricSummary::new(mean(&f), ci[2]),
        ndcg: MetricSummary::new(mean(&n), ci[3]),
    })
}

/// `1 − |A∩B| / |A∪B|`, zero when both sets are empty.
pub fn jaccard_distance<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Case-insensitive `title (year)` keys of a parsed list.
pub fn title_set(list: &ParsedList) -> BTreeSet<String> {
    list.entries.iter().map(|e| e.key()).collect()
}

/// Mean pairwise Jaccard distance among one request's repetitions.
pub fn repetition_diversity<T: Ord>(repetitions: &[BTreeSet<T>]) -> Result<f64, EvalError> {
    let k = repetitions.len();
    if k < 2 {
        return Err(EvalError::TooFewRepetitions(k));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            total += jaccard_distance(&repetitions[i], &repetitions[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityScore {
    pub n_submissions: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Inter-list diversity: the mean over requests of each request's mean
/// pairwise Jaccard distance, with an interval bootstrapped over requests.
pub fn inter_list_diversity<T: Ord>(
    per_submission: &[Vec<BTreeSet<T>>],
    config: &BootstrapConfig,
) -> Result<DiversityScore, EvalError> {
    if per_submission.is_empty() {
        return Err(EvalError::Empty);
    }
    let values = per_submission
        .iter()
        .map(|reps| repetition_diversity(reps))
        .collect::<Result<Vec<f64>, _>>()?;
    let ci = bootstrap_ci(&values, config)?;
    Ok(DiversityScore {
        n_submissions: values.len(),
        mean: mean(&values),
        ci_low: ci.low,
        ci_high: ci.high,
    })
}

/// Share of recommended movies per release-year bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearHistogram {
    /// First year of the first bin.
    pub start: i32,
    /// Exclusive end of the last bin.
    pub end: i32,
    pub bin_width: i32,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub out_of_range: usize,
}

impl YearHistogram {
    pub fn bin_start(&self, bin: usize) -> i32 {
        self.start + bin as i32 * self.bin_width
    }
}

pub const YEAR_BIN_WIDTH: i32 = 5;
pub const YEAR_RANGE_START: i32 = 1950;
pub const YEAR_RANGE_END: i32 = 2025;

/// Histogram of entry years over `[start, end)` in `bin_width` bins.
/// Fractions are over in-range entries; an empty input yields all zeros.
pub fn year_histogram<'a>(
    lists: impl IntoIterator<Item = &'a ParsedList>,
    bin_width: i32,
    start: i32,
    end: i32,
) -> YearHistogram {
    assert!(bin_width > 0 && end > start, "invalid histogram range");
    let n_bins = ((end - start) + bin_width - 1) / bin_width;
    let mut counts = vec![0usize; n_bins as usize];
    let mut out_of_range = 0;
    for list in lists {
        for e in &list.entries {
            if e.year >= start && e.year < end {
                counts[((e.year - start) / bin_width) as usize] += 1;
            } else {
                out_of_range += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let fractions = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    YearHistogram {
        start,
        end,
        bin_width,
        counts,
        fractions,
        out_of_range,
    }
}

/// Index of the repetition whose mean F1 is the median; ties go to the
/// lowest index.
pub fn select_median_repetition(per_repetition_f1: &[f64]) -> Result<usize, EvalError> {
    let k = per_repetition_f1.len();
    if k == 0 {
        return Err(EvalError::Empty);
    }
    if k % 2 == 0 {
        return Err(EvalError::EvenRepetitions(k));
    }
    let mut sorted = per_repetition_f1.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[k / 2];
    Ok(per_repetition_f1
        .iter()
        .position(|v| *v == median)
        .expect("median is an element"))
}
