//! Subcommand bodies. Each returns an [`Outcome`] that `main` maps to an
//! exit code; errors are validation failures.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use narrec_core::corpus::{self, DatasetStats, Exclusion};
use narrec_core::evaluation::{score_ranked, CapSummary, RequestScore};
use narrec_core::prompting::{example_pool, FewShotExample, PromptBuilder, Templates};
use narrec_core::robustness::{
    self, filter_candidates, finalize_dataset, label_all, BuildReport, FilterRules, LabelCache, MoviePool,
    PoolConfig, PoolOutcome, RawDump,
};
use narrec_core::runner::{
    run_plan, BackendKind, Backends, ChatBackend, Experiment, HttpBackend, Progress, RunLog, RunSummary,
};
use narrec_core::stats::BootstrapConfig;
use narrec_core::{evaluation, seed};

use crate::evaluate::{self, ScoreRow, ScoredCell};
use crate::output::{self, Provenance};
use crate::plan::ExperimentPlan;

/// How a command finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Outputs were written but some cells or candidates failed.
    Partial(usize),
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::Partial(_) => 2,
        }
    }

    fn from_failures(n: usize) -> Self {
        if n == 0 {
            Outcome::Success
        } else {
            Outcome::Partial(n)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestManifest {
    pub n_loaded: usize,
    pub n_admitted: usize,
    pub min_gold: usize,
    pub stats: DatasetStats,
    pub caps: CapSummary,
    pub exclusions: Vec<Exclusion>,
}

/// Loads and validates the corpus, writing `manifest.json`.
pub fn ingest(plan: &ExperimentPlan) -> Result<IngestManifest> {
    let corpus = evaluate::load_corpus(plan)?;
    let manifest = IngestManifest {
        n_loaded: corpus.all_submissions.len(),
        n_admitted: corpus.submissions.len(),
        min_gold: plan.data.min_gold.unwrap_or(evaluate::DEFAULT_MIN_GOLD),
        stats: corpus.stats(),
        caps: evaluate::caps(&corpus),
        exclusions: corpus.exclusions.clone(),
    };
    output::write_json(&plan.output_dir.join("manifest.json"), &Provenance::of(plan), &manifest)?;
    Ok(manifest)
}

fn prompt_builder(plan: &ExperimentPlan) -> Result<PromptBuilder> {
    let templates = match &plan.prompts_dir {
        Some(dir) => Templates::from_dir(dir)?,
        None => Templates::default(),
    };
    Ok(PromptBuilder::new(templates))
}

fn few_shot_pool(plan: &ExperimentPlan) -> Result<Vec<FewShotExample>> {
    let strategies = plan.parsed_strategies()?;
    if !strategies.iter().any(|s| s.family() == "few_shot") {
        return Ok(Vec::new());
    }
    let train = corpus::Corpus::load(
        plan.data_path("train_submissions")?,
        plan.data_path("train_gold")?,
        plan.data_path("catalog")?,
        &corpus::CorpusOptions {
            min_gold: plan.data.min_gold.unwrap_or(evaluate::DEFAULT_MIN_GOLD),
            ..Default::default()
        },
    )
    .context("loading the few-shot training split")?;
    Ok(example_pool(&train))
}

/// HTTP backends for the kinds the plan's models use.
pub fn http_backends(plan: &ExperimentPlan) -> Backends {
    let timeout = plan.run.timeout();
    let mut backends = Backends::new();
    let uses = |k: BackendKind| plan.models.iter().any(|m| m.backend == k);
    if uses(BackendKind::LocalServer) {
        backends = backends.with(
            BackendKind::LocalServer,
            Arc::new(HttpBackend::new(BackendKind::LocalServer, &plan.backends.local_server, None, timeout)),
        );
    }
    if uses(BackendKind::HostedApi) {
        let key = std::env::var(&plan.backends.api_key_env).ok();
        if key.is_none() {
            log::warn!("{} is not set; hosted requests go out without credentials", plan.backends.api_key_env);
        }
        backends = backends.with(
            BackendKind::HostedApi,
            Arc::new(HttpBackend::new(BackendKind::HostedApi, &plan.backends.hosted_api, key, timeout)),
        );
    }
    backends
}

/// Executes the plan's missing cells, printing progress to stderr.
pub fn run(plan: &ExperimentPlan, backends: &Backends) -> Result<(RunSummary, Outcome)> {
    plan.validate_for_run()?;
    let corpus = evaluate::load_corpus(plan)?;
    let strategies = plan.parsed_strategies()?;
    let pool = few_shot_pool(plan)?;
    let prompts = prompt_builder(plan)?;
    let experiment = Experiment {
        models: &plan.models,
        strategies: &strategies,
        submissions: &corpus.submissions,
        prompts: &prompts,
        example_pool: &pool,
    };
    let log_path = plan.log_path();
    if let Some(dir) = log_path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let last_percent = AtomicUsize::new(usize::MAX);
    let report = |p: Progress| {
        let percent = if p.total == 0 { 100 } else { p.done * 100 / p.total };
        if last_percent.swap(percent, Ordering::Relaxed) != percent || p.done == p.total {
            eprintln!("cells {}/{} done ({} failed)", p.done, p.total, p.failures);
        }
    };
    let summary = run_plan(&experiment, &plan.run, backends, &log_path, &report)?;
    let failures = RunLog::load(&log_path)?.failures();
    if failures > 0 {
        eprintln!("{failures} cells in {} are failure rows", log_path.display());
    }
    Ok((summary, Outcome::from_failures(failures)))
}

/// Everything downstream of the run log.
pub struct Analysis {
    pub provenance: Provenance,
    pub corpus: corpus::Corpus,
    pub cells: Vec<ScoredCell>,
    pub failed_rows: usize,
}

pub fn analyse(plan: &ExperimentPlan) -> Result<Analysis> {
    let corpus = evaluate::load_corpus(plan)?;
    let log = evaluate::load_log(plan)?;
    let cells = evaluate::score_log(
        &corpus,
        &log,
        plan.seed,
        plan.scoring.match_mode()?,
        plan.scoring.parse_options(),
    )?;
    let failed_rows = log.failures();
    Ok(Analysis {
        provenance: Provenance::of(plan),
        corpus,
        cells,
        failed_rows,
    })
}

#[derive(Serialize)]
struct ParsedLine<'a> {
    model: &'a str,
    strategy: &'a str,
    submission_id: &'a str,
    repetition: u32,
    #[serde(flatten)]
    parsed: &'a narrec_core::parsing::ParsedList,
}

#[derive(Serialize)]
struct MatchLine<'a> {
    model: &'a str,
    strategy: &'a str,
    submission_id: &'a str,
    repetition: u32,
    #[serde(flatten)]
    matched: &'a narrec_core::matching::MatchOutcome,
}

/// parsed.jsonl, matches.jsonl, scores.csv and format_report.csv.
pub fn write_scores(plan: &ExperimentPlan, a: &Analysis) -> Result<()> {
    let dir = &plan.output_dir;
    let parsed: Vec<ParsedLine> = a
        .cells
        .iter()
        .map(|c| ParsedLine {
            model: &c.model,
            strategy: &c.strategy,
            submission_id: &c.submission_id,
            repetition: c.repetition,
            parsed: &c.parsed,
        })
        .collect();
    output::write_jsonl(&dir.join("parsed.jsonl"), &a.provenance, &parsed)?;
    let matches: Vec<MatchLine> = a
        .cells
        .iter()
        .map(|c| MatchLine {
            model: &c.model,
            strategy: &c.strategy,
            submission_id: &c.submission_id,
            repetition: c.repetition,
            matched: &c.matched,
        })
        .collect();
    output::write_jsonl(&dir.join("matches.jsonl"), &a.provenance, &matches)?;
    let rows: Vec<ScoreRow> = a.cells.iter().map(ScoreRow::from).collect();
    output::write_csv(&dir.join("scores.csv"), &a.provenance, &rows)?;
    let format = evaluate::format_table(plan, &a.cells)?;
    output::write_csv(&dir.join("format_report.csv"), &a.provenance, &format)?;
    Ok(())
}

/// aggregate.csv and anova.csv.
pub fn write_stats(plan: &ExperimentPlan, a: &Analysis) -> Result<()> {
    let dir = &plan.output_dir;
    output::write_csv(&dir.join("aggregate.csv"), &a.provenance, &evaluate::aggregate_table(plan, &a.cells)?)?;
    output::write_csv(&dir.join("anova.csv"), &a.provenance, &evaluate::anova_table(plan, &a.cells)?)?;
    Ok(())
}

/// diversity.csv and years.csv.
pub fn write_diversity(plan: &ExperimentPlan, a: &Analysis) -> Result<()> {
    let dir = &plan.output_dir;
    output::write_csv(&dir.join("diversity.csv"), &a.provenance, &evaluate::diversity_table(plan, &a.cells)?)?;
    output::write_csv(&dir.join("years.csv"), &a.provenance, &evaluate::year_table(&a.cells))?;
    Ok(())
}

fn fmt_ci(mean: f64, low: f64, high: f64) -> String {
    format!("{mean:.4} [{low:.4}, {high:.4}]")
}

/// Every table, the plot-data files and a Markdown summary.
pub fn write_report(plan: &ExperimentPlan, a: &Analysis) -> Result<()> {
    write_scores(plan, a)?;
    write_stats(plan, a)?;
    write_diversity(plan, a)?;
    let dir = &plan.output_dir;
    let format = evaluate::format_table(plan, &a.cells)?;
    let aggregate = evaluate::aggregate_table(plan, &a.cells)?;
    let anova = evaluate::anova_table(plan, &a.cells)?;
    let diversity = evaluate::diversity_table(plan, &a.cells)?;
    let years = evaluate::year_table(&a.cells);
    let plots = dir.join("plots");
    output::write_csv(&plots.join("format_adherence.csv"), &a.provenance, &evaluate::plot_format(&format))?;
    output::write_csv(&plots.join("f1_by_model.csv"), &a.provenance, &evaluate::plot_f1(&aggregate, "model"))?;
    output::write_csv(&plots.join("f1_by_family.csv"), &a.provenance, &evaluate::plot_f1(&aggregate, "family"))?;
    output::write_csv(&plots.join("f1_by_size.csv"), &a.provenance, &evaluate::plot_f1(&aggregate, "size"))?;
    output::write_csv(&plots.join("diversity.csv"), &a.provenance, &evaluate::plot_diversity(&diversity))?;
    output::write_csv(&plots.join("years.csv"), &a.provenance, &evaluate::plot_years(&years))?;

    let caps = evaluate::caps(&a.corpus);
    let mut md = String::new();
    md.push_str("# Evaluation report\n\n");
    md.push_str(&format!(
        "{} requests, {} scored responses, {} failed requests. Mean gold size {:.2}; \
         attainable recall {:.4}, attainable F1 {:.4}.\n\n",
        caps.n,
        a.cells.len(),
        a.failed_rows,
        caps.mean_gold_size,
        caps.mean_recall_cap,
        caps.mean_f1_cap
    ));
    md.push_str("## Accuracy by model\n\n| model | strategy | repetition | n | P@10 | R@10 | F1@10 | NDCG@10 |\n|---|---|---|---|---|---|---|---|\n");
    for r in aggregate.iter().filter(|r| r.level == "model") {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.group,
            r.strategy,
            r.repetition,
            r.n,
            fmt_ci(r.precision, r.precision_low, r.precision_high),
            fmt_ci(r.recall, r.recall_low, r.recall_high),
            fmt_ci(r.f1, r.f1_low, r.f1_high),
            fmt_ci(r.ndcg, r.ndcg_low, r.ndcg_high),
        ));
    }
    md.push_str("\n## Format adherence\n\n| model | strategy | responses | valid JSON | exactly ten | unique | year ≤ cutoff |\n|---|---|---|---|---|---|---|\n");
    for r in &format {
        md.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.model, r.strategy, r.n_responses, r.valid_json, r.exactly_ten, r.unique_fraction, r.year_compliance
        ));
    }
    if !diversity.is_empty() {
        md.push_str("\n## Inter-list diversity\n\n| model | strategy | repetitions | diversity |\n|---|---|---|---|\n");
        for r in &diversity {
            md.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                r.model,
                r.strategy,
                r.n_repetitions,
                fmt_ci(r.diversity, r.diversity_low, r.diversity_high)
            ));
        }
    }
    if !anova.is_empty() {
        let sig = anova.iter().filter(|r| r.significant).count();
        md.push_str(&format!(
            "\n## Repetition effects\n\n{} tests, corrected alpha {:.3e}, {} significant.\n",
            anova.len(),
            anova[0].alpha_corrected,
            sig
        ));
    }
    output::write_text(&dir.join("report.md"), &a.provenance, &md)?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct RobustnessArgs {
    /// Raw submissions dump (JSONL: id, created_utc, title, selftext).
    #[arg(long)]
    pub dump_submissions: PathBuf,
    /// Raw comments dump (JSONL: id, link_id, body, score).
    #[arg(long)]
    pub dump_comments: PathBuf,
    /// Reference catalog to resolve titles against.
    #[arg(long)]
    pub reference_catalog: Option<PathBuf>,
    /// Model used as the expert tagger.
    #[arg(long)]
    pub expert_model: String,
    #[arg(long, default_value = "hosted_api")]
    pub expert_backend: String,
    /// Reply cache (default: <output-dir>/expert_cache.jsonl).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// First day to keep, YYYY-MM-DD (UTC).
    #[arg(long)]
    pub start: Option<String>,
    /// Last day to keep, YYYY-MM-DD (UTC), inclusive.
    #[arg(long)]
    pub end: Option<String>,
    #[arg(long, default_value = "request")]
    pub keyword: String,
    #[arg(long, default_value_t = 5)]
    pub min_positive_comments: usize,
    #[arg(long, default_value_t = 10)]
    pub min_recommendations: usize,
}

fn day_bound(day: &str, end: bool) -> Result<i64> {
    let date = chrono::NaiveDate::parse_from_str(day, "%Y-%m-%d").with_context(|| format!("bad date `{day}`"))?;
    let time = if end {
        date.and_hms_opt(23, 59, 59)
    } else {
        date.and_hms_opt(0, 0, 0)
    };
    Ok(time.expect("valid time of day").and_utc().timestamp())
}

impl RobustnessArgs {
    pub fn rules(&self) -> Result<FilterRules> {
        let date_range = match (&self.start, &self.end) {
            (None, None) => None,
            (s, e) => Some((
                s.as_deref().map(|d| day_bound(d, false)).transpose()?.unwrap_or(i64::MIN),
                e.as_deref().map(|d| day_bound(d, true)).transpose()?.unwrap_or(i64::MAX),
            )),
        };
        let rules = FilterRules {
            date_range,
            keyword: self.keyword.clone(),
            min_positive_comments: self.min_positive_comments,
            min_recommendations: self.min_recommendations,
            require_movies_in_request: true,
        };
        rules.validate()?;
        Ok(rules)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessManifest {
    pub report: BuildReport,
    pub dropped: Vec<robustness::DroppedCandidate>,
}

/// Filters a raw dump, labels candidates with the expert and writes the
/// dataset in corpus form to the output directory.
pub fn robustness_build(
    plan: &ExperimentPlan,
    args: &RobustnessArgs,
    expert: &dyn ChatBackend,
) -> Result<(RobustnessManifest, Outcome)> {
    let rules = args.rules()?;
    let dump = RawDump::load(&args.dump_submissions, &args.dump_comments)?;
    let (candidates, filter) = filter_candidates(&dump, &rules);
    eprintln!(
        "{} submissions, {} with keyword, {} candidates",
        filter.n_raw, filter.n_keyword, filter.n_candidates
    );
    std::fs::create_dir_all(&plan.output_dir)?;
    let cache_path = args.cache.clone().unwrap_or_else(|| plan.output_dir.join("expert_cache.jsonl"));
    let mut cache = LabelCache::open(&cache_path)?;
    let labels = label_all(&candidates, &args.expert_model, expert, &plan.run, &mut cache)?;
    let reference = args.reference_catalog.as_deref().map(corpus::load_catalog).transpose()?;
    let dataset = finalize_dataset(&candidates, &labels, reference.as_ref(), &rules);
    dataset.write(&plan.output_dir)?;
    let report = BuildReport::new(filter, &labels, &dataset);
    let manifest = RobustnessManifest {
        dropped: dataset.dropped.clone(),
        report,
    };
    output::write_json(&plan.output_dir.join("build_manifest.json"), &Provenance::of(plan), &manifest)?;
    let review = manifest.report.needs_review;
    Ok((manifest, Outcome::from_failures(review)))
}

pub fn expert_backend(plan: &ExperimentPlan, kind: &str) -> Result<HttpBackend> {
    let kind: BackendKind = serde_json::from_value(serde_json::Value::String(kind.into()))
        .with_context(|| format!("unknown backend `{kind}`"))?;
    let (url, key) = match kind {
        BackendKind::LocalServer => (&plan.backends.local_server, None),
        BackendKind::HostedApi => (&plan.backends.hosted_api, std::env::var(&plan.backends.api_key_env).ok()),
    };
    Ok(HttpBackend::new(kind, url, key, plan.run.timeout()))
}

#[derive(Debug, Clone, Args)]
pub struct SensitivityArgs {
    /// Movie pool in catalog format.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub max_iterations: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub model: String,
    pub strategy: String,
    pub n: usize,
    pub shortfalls: usize,
    pub mean_iterations: f64,
    pub f1: f64,
    pub f1_low: f64,
    pub f1_high: f64,
    pub ndcg: f64,
    pub ndcg_low: f64,
    pub ndcg_high: f64,
}

/// Re-asks every (model, strategy, submission) until ten pool movies are
/// collected and scores the collected lists.
pub fn sensitivity(
    plan: &ExperimentPlan,
    args: &SensitivityArgs,
    backends: &Backends,
) -> Result<(Vec<SensitivityRow>, Outcome)> {
    plan.validate_for_run()?;
    let corpus = evaluate::load_corpus(plan)?;
    let pool = MoviePool::new(corpus::load_catalog(&args.pool)?)?;
    let strategies = plan.parsed_strategies()?;
    let examples = few_shot_pool(plan)?;
    let prompts = prompt_builder(plan)?;
    let config = PoolConfig {
        max_iterations: args.max_iterations,
        mode: plan.scoring.match_mode()?,
        parse: plan.scoring.parse_options(),
        seed: plan.seed,
        ..PoolConfig::default()
    };
    let mut outcomes: Vec<(String, String, PoolOutcome)> = Vec::new();
    for model in &plan.models {
        let Some(backend) = backends.get(model.backend) else {
            bail!("no backend configured for {}", model.backend);
        };
        for strategy in &strategies {
            let bundles = corpus
                .submissions
                .iter()
                .map(|s| prompts.bundle(strategy, s, &examples, 0))
                .collect::<Result<Vec<_>, _>>()?;
            let threads = rayon::ThreadPoolBuilder::new()
                .num_threads(plan.run.max_in_flight.max(1))
                .build()?;
            let results: Vec<PoolOutcome> = threads.install(|| {
                use rayon::prelude::*;
                bundles
                    .par_iter()
                    .map(|b| robustness::constrain_to_pool(b, &model.name, &pool, backend.as_ref(), &plan.run, &config))
                    .collect()
            });
            eprintln!("{} / {}: {} requests done", model.name, strategy.id(), results.len());
            outcomes.extend(results.into_iter().map(|o| (model.name.clone(), strategy.id(), o)));
        }
    }

    #[derive(Serialize)]
    struct Line<'a> {
        model: &'a str,
        strategy: &'a str,
        #[serde(flatten)]
        outcome: &'a PoolOutcome,
    }
    let provenance = Provenance::of(plan);
    let lines: Vec<Line> = outcomes
        .iter()
        .map(|(m, s, o)| Line {
            model: m,
            strategy: s,
            outcome: o,
        })
        .collect();
    output::write_jsonl(&plan.output_dir.join("sensitivity.jsonl"), &provenance, &lines)?;

    let mut groups: BTreeMap<(&str, &str), Vec<&PoolOutcome>> = BTreeMap::new();
    for (m, s, o) in &outcomes {
        groups.entry((m, s)).or_default().push(o);
    }
    let mut rows = Vec::new();
    let mut failures = 0;
    for ((model, strategy), group) in groups {
        let scores: Vec<RequestScore> = group
            .iter()
            .map(|o| {
                let ids: Vec<_> = o.ids.iter().cloned().map(Some).collect();
                score_ranked(&ids, &corpus.gold[&o.submission_id])
            })
            .collect::<Result<_, _>>()?;
        let cfg = BootstrapConfig::with_seed(seed::derive(plan.seed, &["sensitivity", model, strategy]))
            .resamples(plan.scoring.bootstrap_resamples);
        let agg = evaluation::macro_average(&scores, &cfg)?;
        let shortfalls = group.iter().filter(|o| o.shortfall).count();
        failures += group.iter().filter(|o| o.failed_requests > 0).count();
        rows.push(SensitivityRow {
            model: model.into(),
            strategy: strategy.into(),
            n: agg.n,
            shortfalls,
            mean_iterations: group.iter().map(|o| o.iterations as f64).sum::<f64>() / group.len() as f64,
            f1: agg.f1.mean,
            f1_low: agg.f1.ci_low,
            f1_high: agg.f1.ci_high,
            ndcg: agg.ndcg.mean,
            ndcg_low: agg.ndcg.ci_low,
            ndcg_high: agg.ndcg.ci_high,
        });
    }
    output::write_csv(&plan.output_dir.join("sensitivity.csv"), &provenance, &rows)?;
    Ok((rows, Outcome::from_failures(failures)))
}
