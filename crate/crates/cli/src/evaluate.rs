//! From a run log to score tables: parse, match, score, then aggregate.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use narrec_core::corpus::{Corpus, CorpusOptions, Submission};
use narrec_core::evaluation::{
    self, inter_list_diversity, macro_average, score_request, select_median_repetition, title_set, upper_bounds,
    AggregateScore, CapSummary, RequestScore,
};
use narrec_core::matching::{MatchMode, MatchOutcome, TitleIndex};
use narrec_core::parsing::{format_report, parse_response, FormatReport, ParseOptions, ParsedList};
use narrec_core::runner::{RawResponse, RunLog};
use narrec_core::seed;
use narrec_core::stats::{bonferroni_threshold, rm_anova, BootstrapConfig};

use crate::plan::{DiversityBasis, ExperimentPlan, RepetitionPolicy};

pub const DEFAULT_MIN_GOLD: usize = 10;

pub fn load_corpus(plan: &ExperimentPlan) -> Result<Corpus> {
    let options = CorpusOptions {
        min_gold: plan.data.min_gold.unwrap_or(DEFAULT_MIN_GOLD),
        ..CorpusOptions::default()
    };
    Ok(Corpus::load(
        plan.data_path("submissions")?,
        plan.data_path("gold")?,
        plan.data_path("catalog")?,
        &options,
    )?)
}

pub fn load_log(plan: &ExperimentPlan) -> Result<RunLog> {
    let path = plan.log_path();
    let log = RunLog::load(&path).with_context(|| format!("reading run log {}", path.display()))?;
    if log.rows.is_empty() {
        bail!("no responses in run log {}", path.display());
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    InvalidJson,
    /// The request itself failed after retries.
    Failed,
}

/// One log row after parsing, matching and scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCell {
    pub model: String,
    pub strategy: String,
    pub submission_id: String,
    pub repetition: u32,
    pub status: CellStatus,
    pub cutoff_year: i32,
    pub parsed: ParsedList,
    pub matched: MatchOutcome,
    pub score: RequestScore,
}

/// Seed for capping one response at ten entries.
pub fn parse_seed(base: u64, row: &RawResponse) -> u64 {
    seed::derive(
        base,
        &["parse", &row.model, &row.strategy, &row.submission_id, &row.repetition.to_string()],
    )
}

/// Scores every row of `log` whose submission is admitted in `corpus`.
/// Output is sorted by (model, strategy, submission, repetition).
/// Unparsable and failed responses score zero.
pub fn score_log(
    corpus: &Corpus,
    log: &RunLog,
    base_seed: u64,
    mode: MatchMode,
    parse: ParseOptions,
) -> Result<Vec<ScoredCell>> {
    let submissions: HashMap<&str, &Submission> = corpus.submissions.iter().map(|s| (s.id.as_str(), s)).collect();
    // Titles are only ever resolved against the request's own gold items.
    let indexes: HashMap<&str, TitleIndex> = corpus
        .gold
        .iter()
        .map(|(id, g)| (id.as_str(), TitleIndex::new(corpus.catalog.select(g.items.iter()))))
        .collect();
    let mut rows: Vec<&RawResponse> = log.rows.iter().collect();
    let before = rows.len();
    rows.retain(|r| submissions.contains_key(r.submission_id.as_str()));
    if rows.len() < before {
        log::warn!("{} log rows refer to submissions outside the corpus; ignored", before - rows.len());
    }
    if rows.is_empty() {
        bail!("no responses for submissions in the corpus");
    }
    rows.sort_by(|a, b| a.key().cmp(&b.key()));

    rows.par_iter()
        .map(|row| -> Result<ScoredCell> {
            let sub = submissions[row.submission_id.as_str()];
            let gold = &corpus.gold[&sub.id];
            let (status, parsed) = match &row.text {
                None => (CellStatus::Failed, ParsedList::invalid()),
                Some(text) => {
                    let parsed = parse_response(text, parse_seed(base_seed, row), parse);
                    let status = if parsed.valid_json {
                        CellStatus::Ok
                    } else {
                        CellStatus::InvalidJson
                    };
                    (status, parsed)
                }
            };
            let matched = indexes[sub.id.as_str()].match_list(&parsed, mode);
            let score = score_request(&matched, gold)?;
            Ok(ScoredCell {
                model: row.model.clone(),
                strategy: row.strategy.clone(),
                submission_id: row.submission_id.clone(),
                repetition: row.repetition,
                status,
                cutoff_year: sub.year(),
                parsed,
                matched,
                score,
            })
        })
        .collect()
}

/// Flat per-cell row of `scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub strategy: String,
    pub submission_id: String,
    pub repetition: u32,
    pub status: CellStatus,
    pub n_entries: usize,
    pub n_matched: usize,
    pub n_hits: usize,
    pub gold_size: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ndcg: f64,
}

impl From<&ScoredCell> for ScoreRow {
    fn from(c: &ScoredCell) -> Self {
        Self {
            model: c.model.clone(),
            strategy: c.strategy.clone(),
            submission_id: c.submission_id.clone(),
            repetition: c.repetition,
            status: c.status,
            n_entries: c.parsed.entries.len(),
            n_matched: c.matched.matched().count(),
            n_hits: c.score.n_hits,
            gold_size: c.score.gold_size,
            precision: c.score.precision,
            recall: c.score.recall,
            f1: c.score.f1,
            ndcg: c.score.ndcg,
        }
    }
}

type GroupKey = (String, String);

/// Cells grouped by (model, strategy), in key order.
pub fn group_cells(cells: &[ScoredCell]) -> BTreeMap<GroupKey, Vec<&ScoredCell>> {
    let mut groups: BTreeMap<GroupKey, Vec<&ScoredCell>> = BTreeMap::new();
    for c in cells {
        groups.entry((c.model.clone(), c.strategy.clone())).or_default().push(c);
    }
    groups
}

fn bootstrap(plan: &ExperimentPlan, labels: &[&str]) -> BootstrapConfig {
    BootstrapConfig::with_seed(seed::derive(plan.seed, labels)).resamples(plan.scoring.bootstrap_resamples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatRow {
    pub model: String,
    pub strategy: String,
    pub n_responses: usize,
    pub n_failed_requests: usize,
    pub valid_json: f64,
    pub valid_json_low: f64,
    pub valid_json_high: f64,
    pub exactly_ten: f64,
    pub exactly_ten_low: f64,
    pub exactly_ten_high: f64,
    pub exactly_ten_all: f64,
    pub unique_fraction: f64,
    pub unique_fraction_low: f64,
    pub unique_fraction_high: f64,
    pub year_compliance: f64,
    pub year_compliance_low: f64,
    pub year_compliance_high: f64,
}

impl FormatRow {
    fn new(model: &str, strategy: &str, failed: usize, r: &FormatReport) -> Self {
        Self {
            model: model.into(),
            strategy: strategy.into(),
            n_responses: r.n_responses,
            n_failed_requests: failed,
            valid_json: r.valid_json.value,
            valid_json_low: r.valid_json.ci_low,
            valid_json_high: r.valid_json.ci_high,
            exactly_ten: r.exactly_ten.value,
            exactly_ten_low: r.exactly_ten.ci_low,
            exactly_ten_high: r.exactly_ten.ci_high,
            exactly_ten_all: r.exactly_ten_all.value,
            unique_fraction: r.unique_fraction.value,
            unique_fraction_low: r.unique_fraction.ci_low,
            unique_fraction_high: r.unique_fraction.ci_high,
            year_compliance: r.year_compliance.value,
            year_compliance_low: r.year_compliance.ci_low,
            year_compliance_high: r.year_compliance.ci_high,
        }
    }
}

/// Format adherence per (model, strategy). Failed requests produced no
/// response and are left out of the ratios.
pub fn format_table(plan: &ExperimentPlan, cells: &[ScoredCell]) -> Result<Vec<FormatRow>> {
    let mut out = Vec::new();
    for ((model, strategy), group) in group_cells(cells) {
        let responses: Vec<(&ParsedList, i32)> = group
            .iter()
            .filter(|c| c.status != CellStatus::Failed)
            .map(|c| (&c.parsed, c.cutoff_year))
            .collect();
        let failed = group.len() - responses.len();
        if responses.is_empty() {
            log::warn!("{model} / {strategy}: every request failed; no format row");
            continue;
        }
        let report = format_report(&responses, &bootstrap(plan, &["format", &model, &strategy]))?;
        out.push(FormatRow::new(&model, &strategy, failed, &report));
    }
    Ok(out)
}

/// Per-repetition mean F1 of a group, keyed by repetition.
fn repetition_means(group: &[&ScoredCell]) -> BTreeMap<u32, f64> {
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for c in group {
        let e = sums.entry(c.repetition).or_default();
        e.0 += c.score.f1;
        e.1 += 1;
    }
    sums.into_iter().map(|(r, (s, n))| (r, s / n as f64)).collect()
}

/// The cells of `group` the repetition policy admits, plus a label for it.
pub fn select_cells<'a>(policy: RepetitionPolicy, group: &[&'a ScoredCell]) -> Result<(String, Vec<&'a ScoredCell>)> {
    let chosen = match policy {
        RepetitionPolicy::All => return Ok(("all".into(), group.to_vec())),
        RepetitionPolicy::Index(i) => i,
        RepetitionPolicy::Median => {
            let means = repetition_means(group);
            let reps: Vec<u32> = means.keys().copied().collect();
            let values: Vec<f64> = means.values().copied().collect();
            let idx = select_median_repetition(&values).with_context(|| {
                format!("median repetition needs an odd number of repetitions, found {}; pass --repetition all or an index", values.len())
            })?;
            reps[idx]
        }
    };
    let cells: Vec<&ScoredCell> = group.iter().copied().filter(|c| c.repetition == chosen).collect();
    if cells.is_empty() {
        bail!("repetition {chosen} has no responses");
    }
    Ok((chosen.to_string(), cells))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// `model`, `family` or `size`.
    pub level: String,
    pub group: String,
    pub strategy: String,
    pub repetition: String,
    pub n: usize,
    pub precision: f64,
    pub precision_low: f64,
    pub precision_high: f64,
    pub recall: f64,
    pub recall_low: f64,
    pub recall_high: f64,
    pub f1: f64,
    pub f1_low: f64,
    pub f1_high: f64,
    pub ndcg: f64,
    pub ndcg_low: f64,
    pub ndcg_high: f64,
}

impl AggregateRow {
    fn new(level: &str, group: &str, strategy: &str, repetition: &str, a: &AggregateScore) -> Self {
        Self {
            level: level.into(),
            group: group.into(),
            strategy: strategy.into(),
            repetition: repetition.into(),
            n: a.n,
            precision: a.precision.mean,
            precision_low: a.precision.ci_low,
            precision_high: a.precision.ci_high,
            recall: a.recall.mean,
            recall_low: a.recall.ci_low,
            recall_high: a.recall.ci_high,
            f1: a.f1.mean,
            f1_low: a.f1.ci_low,
            f1_high: a.f1.ci_high,
            ndcg: a.ndcg.mean,
            ndcg_low: a.ndcg.ci_low,
            ndcg_high: a.ndcg.ci_high,
        }
    }
}

/// Macro averages per model, then per model family and per size category
/// (pooling the selected cells of member models), each split by strategy.
pub fn aggregate_table(plan: &ExperimentPlan, cells: &[ScoredCell]) -> Result<Vec<AggregateRow>> {
    let mut out = Vec::new();
    let mut pooled: BTreeMap<(&'static str, String, String), (BTreeSet<String>, Vec<RequestScore>)> = BTreeMap::new();
    for ((model, strategy), group) in group_cells(cells) {
        let (rep, chosen) = select_cells(plan.scoring.repetition, &group)?;
        let scores: Vec<RequestScore> = chosen.iter().map(|c| c.score).collect();
        let agg = macro_average(&scores, &bootstrap(plan, &["aggregate", "model", &model, &strategy]))?;
        out.push(AggregateRow::new("model", &model, &strategy, &rep, &agg));
        let Some(spec) = plan.model(&model) else {
            log::warn!("model `{model}` is not in the plan; left out of family and size aggregates");
            continue;
        };
        for (level, key) in [("family", spec.family.clone()), ("size", spec.size_category.to_string())] {
            let entry = pooled.entry((level, key, strategy.clone())).or_default();
            entry.0.insert(rep.clone());
            entry.1.extend(scores.iter().copied());
        }
    }
    for ((level, key, strategy), (reps, scores)) in pooled {
        let rep = if reps.len() == 1 {
            reps.into_iter().next().unwrap_or_default()
        } else {
            "mixed".into()
        };
        let agg = macro_average(&scores, &bootstrap(plan, &["aggregate", level, &key, &strategy]))?;
        out.push(AggregateRow::new(level, &key, &strategy, &rep, &agg));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaRow {
    pub model: String,
    pub strategy: String,
    pub metric: String,
    pub n_subjects: usize,
    pub n_repetitions: usize,
    pub f_value: f64,
    pub df_num: usize,
    pub df_den: usize,
    pub p_value: f64,
    pub alpha_corrected: f64,
    pub significant: bool,
}

const METRICS: [(&str, fn(&RequestScore) -> f64); 4] = [
    ("precision", |s| s.precision),
    ("recall", |s| s.recall),
    ("f1", |s| s.f1),
    ("ndcg", |s| s.ndcg),
];

/// Repeated-measures ANOVA across repetitions for every (model, strategy)
/// with at least two repetitions. Only submissions with a response in every
/// repetition enter the matrix.
pub fn anova_table(plan: &ExperimentPlan, cells: &[ScoredCell]) -> Result<Vec<AnovaRow>> {
    let mut out = Vec::new();
    for ((model, strategy), group) in group_cells(cells) {
        let reps: BTreeSet<u32> = group.iter().map(|c| c.repetition).collect();
        if reps.len() < 2 {
            continue;
        }
        let mut by_sub: BTreeMap<&str, BTreeMap<u32, &RequestScore>> = BTreeMap::new();
        for c in &group {
            by_sub.entry(&c.submission_id).or_default().insert(c.repetition, &c.score);
        }
        let complete: Vec<Vec<&RequestScore>> = by_sub
            .values()
            .filter(|m| m.len() == reps.len())
            .map(|m| m.values().copied().collect())
            .collect();
        for (metric, get) in METRICS {
            let matrix: Vec<Vec<f64>> = complete.iter().map(|row| row.iter().map(|s| get(s)).collect()).collect();
            match rm_anova(&matrix) {
                Ok(r) => out.push(AnovaRow {
                    model: model.clone(),
                    strategy: strategy.clone(),
                    metric: metric.into(),
                    n_subjects: matrix.len(),
                    n_repetitions: reps.len(),
                    f_value: r.f_value,
                    df_num: r.df_num,
                    df_den: r.df_den,
                    p_value: r.p_value,
                    alpha_corrected: 0.0,
                    significant: false,
                }),
                Err(e) => log::warn!("{model} / {strategy} / {metric}: no ANOVA ({e})"),
            }
        }
    }
    if !out.is_empty() {
        let alpha = bonferroni_threshold(0.05, plan.scoring.bonferroni_tests.unwrap_or(out.len()))?;
        for row in &mut out {
            row.alpha_corrected = alpha;
            row.significant = row.p_value < alpha;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub model: String,
    pub strategy: String,
    pub n_submissions: usize,
    pub n_repetitions: usize,
    pub diversity: f64,
    pub diversity_low: f64,
    pub diversity_high: f64,
}

/// Inter-list diversity over normalized `title (year)` strings, or matched
/// ids, for every (model, strategy) with at least two repetitions.
pub fn diversity_table(plan: &ExperimentPlan, cells: &[ScoredCell]) -> Result<Vec<DiversityRow>> {
    let mut out = Vec::new();
    for ((model, strategy), group) in group_cells(cells) {
        let reps: BTreeSet<u32> = group.iter().map(|c| c.repetition).collect();
        if reps.len() < 2 {
            continue;
        }
        let mut by_sub: BTreeMap<&str, Vec<BTreeSet<String>>> = BTreeMap::new();
        for c in &group {
            let list = match plan.scoring.diversity_basis {
                DiversityBasis::Titles => title_set(&c.parsed),
                DiversityBasis::Ids => c.matched.matched().map(|id| id.as_str().to_string()).collect(),
            };
            by_sub.entry(&c.submission_id).or_default().push(list);
        }
        let lists: Vec<Vec<BTreeSet<String>>> = by_sub.into_values().filter(|v| v.len() == reps.len()).collect();
        if lists.is_empty() {
            continue;
        }
        let d = inter_list_diversity(&lists, &bootstrap(plan, &["diversity", &model, &strategy]))?;
        out.push(DiversityRow {
            model,
            strategy,
            n_submissions: d.n_submissions,
            n_repetitions: reps.len(),
            diversity: d.mean,
            diversity_low: d.ci_low,
            diversity_high: d.ci_high,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearRow {
    pub model: String,
    pub strategy: String,
    /// `1950-1954`, or `other` for years outside the histogram.
    pub bin: String,
    pub bin_start: Option<i32>,
    pub count: usize,
    /// Share of in-range entries; empty for `other`.
    pub fraction: Option<f64>,
}

/// Release-year histogram of all parsed entries per (model, strategy).
pub fn year_table(cells: &[ScoredCell]) -> Vec<YearRow> {
    let mut out = Vec::new();
    for ((model, strategy), group) in group_cells(cells) {
        let h = evaluation::year_histogram(
            group.iter().map(|c| &c.parsed),
            evaluation::YEAR_BIN_WIDTH,
            evaluation::YEAR_RANGE_START,
            evaluation::YEAR_RANGE_END,
        );
        for (i, (&count, &fraction)) in h.counts.iter().zip(&h.fractions).enumerate() {
            let start = h.bin_start(i);
            out.push(YearRow {
                model: model.clone(),
                strategy: strategy.clone(),
                bin: format!("{start}-{}", (start + h.bin_width - 1).min(h.end - 1)),
                bin_start: Some(start),
                count,
                fraction: Some(fraction),
            });
        }
        out.push(YearRow {
            model,
            strategy,
            bin: "other".into(),
            bin_start: None,
            count: h.out_of_range,
            fraction: None,
        });
    }
    out
}

/// Recall and F1 ceilings of the corpus under the ten-item cut-off.
pub fn caps(corpus: &Corpus) -> CapSummary {
    upper_bounds(corpus.gold.values())
}

/// One point of a plot-data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub series: String,
    pub x: String,
    pub y: f64,
    pub err_low: f64,
    pub err_high: f64,
}

pub fn plot_format(rows: &[FormatRow]) -> Vec<PlotRow> {
    let mut out = Vec::new();
    for r in rows {
        for (measure, y, lo, hi) in [
            ("valid_json", r.valid_json, r.valid_json_low, r.valid_json_high),
            ("exactly_ten", r.exactly_ten, r.exactly_ten_low, r.exactly_ten_high),
            ("unique_fraction", r.unique_fraction, r.unique_fraction_low, r.unique_fraction_high),
            ("year_compliance", r.year_compliance, r.year_compliance_low, r.year_compliance_high),
        ] {
            out.push(PlotRow {
                series: format!("{}/{measure}", r.strategy),
                x: r.model.clone(),
                y,
                err_low: lo,
                err_high: hi,
            });
        }
    }
    out
}

pub fn plot_f1(rows: &[AggregateRow], level: &str) -> Vec<PlotRow> {
    rows.iter()
        .filter(|r| r.level == level)
        .map(|r| PlotRow {
            series: r.strategy.clone(),
            x: r.group.clone(),
            y: r.f1,
            err_low: r.f1_low,
            err_high: r.f1_high,
        })
        .collect()
}

pub fn plot_diversity(rows: &[DiversityRow]) -> Vec<PlotRow> {
    rows.iter()
        .map(|r| PlotRow {
            series: r.strategy.clone(),
            x: r.model.clone(),
            y: r.diversity,
            err_low: r.diversity_low,
            err_high: r.diversity_high,
        })
        .collect()
}

pub fn plot_years(rows: &[YearRow]) -> Vec<PlotRow> {
    rows.iter()
        .filter_map(|r| {
            let y = r.fraction?;
            Some(PlotRow {
                series: format!("{}/{}", r.model, r.strategy),
                x: r.bin_start?.to_string(),
                y,
                err_low: y,
                err_high: y,
            })
        })
        .collect()
}
