//! Experiment plans: a TOML file overlaid with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use narrec_core::matching::{MatchMode, SoftScope};
use narrec_core::parsing::ParseOptions;
use narrec_core::prompting::Strategy;
use narrec_core::runner::{BackendKind, ModelSpec, RunConfig, SizeCategory};
use narrec_core::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Base seed; every random draw derives from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/run_log.jsonl`.
    pub run_log: Option<PathBuf>,
    pub strategies: Vec<String>,
    pub data: DataPaths,
    pub run: RunConfig,
    pub backends: BackendUrls,
    pub scoring: ScoringConfig,
    pub models: Vec<ModelSpec>,
    /// Directory of prompt template overrides.
    pub prompts_dir: Option<PathBuf>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            run_log: None,
            strategies: vec!["zero_shot".into()],
            data: DataPaths::default(),
            run: RunConfig::default(),
            backends: BackendUrls::default(),
            scoring: ScoringConfig::default(),
            models: Vec::new(),
            prompts_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub submissions: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    /// Training split the few-shot examples are drawn from.
    pub train_submissions: Option<PathBuf>,
    pub train_gold: Option<PathBuf>,
    pub min_gold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendUrls {
    pub local_server: String,
    pub hosted_api: String,
    /// Environment variable holding the hosted API key.
    pub api_key_env: String,
}

impl Default for BackendUrls {
    fn default() -> Self {
        Self {
            local_server: "http://127.0.0.1:11434".into(),
            hosted_api: "https://api.openai.com".into(),
            api_key_env: "NARREC_API_KEY".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Exact,
    Soft,
}

/// Which repetition of a (model, strategy) pair enters the aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepetitionPolicy {
    /// The repetition with the median mean F1.
    Median,
    /// Every repetition pooled.
    All,
    /// A fixed repetition index.
    Index(u32),
}

impl std::str::FromStr for RepetitionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "median" => Ok(Self::Median),
            "all" => Ok(Self::All),
            n => n
                .parse()
                .map(Self::Index)
                .map_err(|_| format!("expected `median`, `all` or a repetition index, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    #[serde(rename = "match")]
    pub match_kind: MatchKind,
    pub threshold: f64,
    pub scope: SoftScope,
    pub repetition: RepetitionPolicy,
    pub bootstrap_resamples: usize,
    pub strict_json: bool,
    /// Bonferroni family size; defaults to the number of tests performed.
    pub bonferroni_tests: Option<usize>,
    pub diversity_basis: DiversityBasis,
}

/// What the lists compared for diversity contain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityBasis {
    /// Normalized `title (year)` strings, so unmatched movies count too.
    #[default]
    Titles,
    /// Matched catalog ids only.
    Ids,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            match_kind: MatchKind::Exact,
            threshold: 0.9,
            scope: SoftScope::Title,
            repetition: RepetitionPolicy::Median,
            bootstrap_resamples: narrec_core::stats::bootstrap::DEFAULT_RESAMPLES,
            strict_json: false,
            bonferroni_tests: None,
            diversity_basis: DiversityBasis::Titles,
        }
    }
}

impl ScoringConfig {
    pub fn match_mode(&self) -> Result<MatchMode> {
        Ok(match self.match_kind {
            MatchKind::Exact => MatchMode::Exact,
            MatchKind::Soft => MatchMode::soft_with_scope(self.threshold, self.scope)?,
        })
    }

    pub fn parse_options(&self) -> ParseOptions {
        ParseOptions {
            strict: self.strict_json,
        }
    }
}

/// Flags shared by every plan-driven subcommand. Set flags win over the
/// plan file, which wins over built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct PlanArgs {
    /// TOML plan file.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub submissions: Option<PathBuf>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Run log path (default: <output-dir>/run_log.jsonl).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated strategy ids, e.g. `zero_shot,identity:movie_critic,few_shot:5`.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<String>>,
    /// Model as `name,family,size_category,backend`; repeatable. Replaces the plan's models.
    #[arg(long = "model")]
    pub models: Vec<String>,
    #[arg(long)]
    pub repetitions: Option<u32>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// `exact` or `soft`.
    #[arg(long = "match")]
    pub match_kind: Option<String>,
    /// Soft-match threshold in (0, 1].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// `median`, `all` or a repetition index.
    #[arg(long)]
    pub repetition: Option<RepetitionPolicy>,
    #[arg(long)]
    pub bootstrap_resamples: Option<usize>,
}

fn parse_model(spec: &str) -> Result<ModelSpec> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let [name, family, size, backend] = parts[..] else {
        bail!("model `{spec}` must be `name,family,size_category,backend`");
    };
    let size: SizeCategory = serde_json::from_value(serde_json::Value::String(size.into()))
        .with_context(|| format!("unknown size category `{size}`"))?;
    let backend: BackendKind = serde_json::from_value(serde_json::Value::String(backend.into()))
        .with_context(|| format!("unknown backend `{backend}`"))?;
    Ok(ModelSpec {
        name: name.into(),
        family: family.into(),
        size_category: size,
        backend,
        params_billions: None,
    })
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl ExperimentPlan {
    /// Reads a plan file; relative paths inside it resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
        let mut plan: ExperimentPlan = toml::from_str(&text).with_context(|| format!("parsing plan {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let d = &mut plan.data;
        for p in [
            &mut d.submissions,
            &mut d.gold,
            &mut d.catalog,
            &mut d.train_submissions,
            &mut d.train_gold,
            &mut plan.run_log,
            &mut plan.prompts_dir,
        ] {
            rebase(base, p);
        }
        if plan.output_dir.is_relative() {
            plan.output_dir = base.join(&plan.output_dir);
        }
        Ok(plan)
    }

    pub fn resolve(args: &PlanArgs) -> Result<Self> {
        let mut plan = match &args.plan {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        set(&mut plan.data.submissions, &args.submissions);
        set(&mut plan.data.gold, &args.gold);
        set(&mut plan.data.catalog, &args.catalog);
        set(&mut plan.run_log, &args.log);
        if let Some(d) = &args.output_dir {
            plan.output_dir = d.clone();
        }
        if let Some(s) = args.seed {
            plan.seed = s;
        }
        if let Some(s) = &args.strategies {
            plan.strategies = s.clone();
        }
        if !args.models.is_empty() {
            plan.models = args.models.iter().map(|m| parse_model(m)).collect::<Result<_>>()?;
        }
        if let Some(r) = args.repetitions {
            plan.run.repetitions = r;
        }
        if let Some(n) = args.max_in_flight {
            plan.run.max_in_flight = n;
        }
        if let Some(m) = &args.match_kind {
            plan.scoring.match_kind = serde_json::from_value(serde_json::Value::String(m.clone()))
                .with_context(|| format!("--match must be `exact` or `soft`, got `{m}`"))?;
        }
        if let Some(t) = args.threshold {
            plan.scoring.threshold = t;
        }
        if let Some(r) = args.repetition {
            plan.scoring.repetition = r;
        }
        if let Some(n) = args.bootstrap_resamples {
            plan.scoring.bootstrap_resamples = n;
        }
        Ok(plan)
    }

    pub fn log_path(&self) -> PathBuf {
        self.run_log.clone().unwrap_or_else(|| self.output_dir.join("run_log.jsonl"))
    }

    pub fn parsed_strategies(&self) -> Result<Vec<Strategy>> {
        let mut out: Vec<Strategy> = Vec::new();
        for id in &self.strategies {
            let s = Strategy::parse_id(id, self.seed)?;
            if out.iter().any(|o| o.id() == s.id()) {
                bail!("strategy `{id}` listed twice");
            }
            out.push(s);
        }
        Ok(out)
    }

    /// Path of a dataset file, failing with the field name when unset or
    /// absent on disk.
    pub fn data_path(&self, field: &str) -> Result<&Path> {
        let slot = match field {
            "submissions" => &self.data.submissions,
            "gold" => &self.data.gold,
            "catalog" => &self.data.catalog,
            "train_submissions" => &self.data.train_submissions,
            "train_gold" => &self.data.train_gold,
            other => bail!("unknown data field `{other}`"),
        };
        let Some(path) = slot else {
            bail!("no `{field}` path given (set data.{field} in the plan or pass --{field})");
        };
        if !path.exists() {
            bail!("{field} file {} does not exist", path.display());
        }
        Ok(path)
    }

    /// Checks everything `run` needs before any request is sent.
    pub fn validate_for_run(&self) -> Result<()> {
        self.data_path("submissions")?;
        self.data_path("gold")?;
        self.data_path("catalog")?;
        if self.models.is_empty() {
            bail!("the plan lists no models");
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.models {
            m.validate()?;
            if !names.insert(&m.name) {
                bail!("model `{}` listed twice", m.name);
            }
        }
        let strategies = self.parsed_strategies()?;
        if strategies.is_empty() {
            bail!("the plan lists no strategies");
        }
        if strategies.iter().any(|s| s.family() == "few_shot") {
            self.data_path("train_submissions")?;
            self.data_path("train_gold")?;
        }
        if self.run.repetitions == 0 {
            bail!("repetitions must be at least 1");
        }
        self.scoring.match_mode()?;
        Ok(())
    }

    /// Hash of the resolved plan, stamped into every output.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("plan serializes");
        seed::content_hash(&[&canonical])[..16].to_string()
    }

    pub fn model(&self, name: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.name == name)
    }
}
