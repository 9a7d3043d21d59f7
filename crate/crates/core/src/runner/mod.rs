//! Execution of an experiment grid (models × strategies × submissions ×
//! repetitions) against chat-completion backends.
//!
//! Workers send requests concurrently, at most `max_in_flight` per backend,
//! and hand finished rows to the calling thread, which is the only writer of
//! the run log. Cells already present in the log are skipped, so an
//! interrupted run resumes where it stopped.

pub mod backend;
pub mod log;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Submission;
use crate::prompting::{FewShotExample, PromptBuilder, PromptBundle, PromptError, Strategy};

pub use self::backend::{complete, ChatBackend, ChatRequest, CompletionError, ErrorClass, FnBackend, HttpBackend};
pub use self::log::{LogHeader, LogWriter, RunLog};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed run-log row: {message}")]
    MalformedLog { path: PathBuf, line: usize, message: String },
    #[error("invalid model `{name}`: {reason}")]
    InvalidModel { name: String, reason: String },
    #[error("no backend configured for {0}")]
    MissingBackend(BackendKind),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl RunnerError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        RunnerError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeCategory {
    Tiny,
    Small,
    Medium,
    Large,
}

impl SizeCategory {
    /// Category boundaries in billions of parameters: <4, [4,10), [10,50), ≥50.
    pub fn from_params(billions: f64) -> Self {
        if billions < 4.0 {
            SizeCategory::Tiny
        } else if billions < 10.0 {
            SizeCategory::Small
        } else if billions < 50.0 {
            SizeCategory::Medium
        } else {
            SizeCategory::Large
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SizeCategory::Tiny => "tiny",
            SizeCategory::Small => "small",
            SizeCategory::Medium => "medium",
            SizeCategory::Large => "large",
        }
    }
}

impl fmt::Display for SizeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    LocalServer,
    HostedApi,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::LocalServer => "local_server",
            BackendKind::HostedApi => "hosted_api",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub family: String,
    pub size_category: SizeCategory,
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_billions: Option<f64>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), RunnerError> {
        let invalid = |reason: String| RunnerError::InvalidModel {
            name: self.name.clone(),
            reason,
        };
        if self.name.trim().is_empty() || self.name.chars().any(char::is_whitespace) {
            return Err(invalid("name must be non-empty and contain no whitespace".into()));
        }
        if let Some(b) = self.params_billions {
            if !(b > 0.0 && b.is_finite()) {
                return Err(invalid(format!("parameter count {b} must be positive")));
            }
            let expected = SizeCategory::from_params(b);
            if expected != self.size_category {
                return Err(invalid(format!(
                    "{b}B parameters belong to `{expected}`, not `{}`",
                    self.size_category
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub context_window_tokens: u32,
    pub max_response_tokens: u32,
    /// Repetitions per cell.
    pub repetitions: u32,
    /// Repetitions for zero-shot cells when they differ from the rest.
    pub zero_shot_repetitions: Option<u32>,
    pub max_in_flight: usize,
    pub retry_limit: u32,
    pub timeout_secs: u64,
    pub backoff_base_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            context_window_tokens: 4096,
            max_response_tokens: 500,
            repetitions: 3,
            zero_shot_repetitions: None,
            max_in_flight: 4,
            retry_limit: 3,
            timeout_secs: 60,
            backoff_base_ms: 500,
        }
    }
}

impl RunConfig {
    /// The zero-shot variance study: 30 repetitions.
    pub fn variance_study() -> Self {
        Self {
            repetitions: 30,
            ..Self::default()
        }
    }

    pub fn repetitions_for(&self, strategy: &Strategy) -> u32 {
        match self.zero_shot_repetitions {
            Some(n) if strategy.is_zero_shot() => n,
            _ => self.repetitions,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

/// Identity of one plan cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub strategy: String,
    pub submission_id: String,
    pub repetition: u32,
}

/// Why a cell produced no text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureInfo {
    pub class: ErrorClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    pub message: String,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub model: String,
    pub strategy: String,
    pub submission_id: String,
    pub repetition: u32,
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<FailureInfo>,
    pub attempts: u32,
    pub latency_ms: u64,
    /// Unix milliseconds when the row was produced.
    pub timestamp: i64,
    pub prompt_hash: String,
}

impl RawResponse {
    pub fn key(&self) -> CellKey {
        CellKey {
            model: self.model.clone(),
            strategy: self.strategy.clone(),
            submission_id: self.submission_id.clone(),
            repetition: self.repetition,
        }
    }

    pub fn is_failure(&self) -> bool {
        self.error.is_some()
    }
}

/// Backends keyed by kind.
#[derive(Clone, Default)]
pub struct Backends {
    map: HashMap<BackendKind, Arc<dyn ChatBackend>>,
}

impl Backends {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, kind: BackendKind, backend: Arc<dyn ChatBackend>) -> Self {
        self.map.insert(kind, backend);
        self
    }

    pub fn get(&self, kind: BackendKind) -> Option<&Arc<dyn ChatBackend>> {
        self.map.get(&kind)
    }
}

/// Everything needed to render the prompts of a plan.
pub struct Experiment<'a> {
    pub models: &'a [ModelSpec],
    pub strategies: &'a [Strategy],
    pub submissions: &'a [Submission],
    pub prompts: &'a PromptBuilder,
    pub example_pool: &'a [FewShotExample],
}

impl Experiment<'_> {
    /// All cells in deterministic order.
    pub fn cells(&self, config: &RunConfig) -> Vec<CellKey> {
        let mut out = Vec::new();
        for m in self.models {
            for s in self.strategies {
                for sub in self.submissions {
                    for rep in 0..config.repetitions_for(s) {
                        out.push(CellKey {
                            model: m.name.clone(),
                            strategy: s.id(),
                            submission_id: sub.id.clone(),
                            repetition: rep,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunSummary {
    pub total_cells: usize,
    pub already_present: usize,
    pub written: usize,
    pub failures: usize,
}

struct Job {
    key: CellKey,
    model_idx: usize,
    bundle: PromptBundle,
}

/// Runs every missing cell of the plan and appends one row per cell to the
/// log at `log_path`. Per-cell failures are logged as failure rows.
pub fn run_plan(
    experiment: &Experiment<'_>,
    config: &RunConfig,
    backends: &Backends,
    log_path: &Path,
    on_progress: &(dyn Fn(Progress) + Sync),
) -> Result<RunSummary, RunnerError> {
    for m in experiment.models {
        m.validate()?;
        if backends.get(m.backend).is_none() {
            return Err(RunnerError::MissingBackend(m.backend));
        }
    }
    let existing = RunLog::load(log_path)?.keys();
    let all = experiment.cells(config);
    let total = all.len();

    let submissions: HashMap<&str, &Submission> =
        experiment.submissions.iter().map(|s| (s.id.as_str(), s)).collect();
    let strategies: HashMap<String, &Strategy> = experiment.strategies.iter().map(|s| (s.id(), s)).collect();
    let models: HashMap<&str, usize> = experiment
        .models
        .iter()
        .enumerate()
        .map(|(i, m)| (m.name.as_str(), i))
        .collect();

    // Render every prompt before sending anything so template errors abort early.
    let mut queues: BTreeMap<BackendKind, Vec<Job>> = BTreeMap::new();
    let mut already_present = 0;
    let mut planned = HashSet::new();
    for key in all {
        if existing.contains(&key) || !planned.insert(key.clone()) {
            already_present += 1;
            continue;
        }
        let bundle = experiment.prompts.bundle(
            strategies[&key.strategy],
            submissions[key.submission_id.as_str()],
            experiment.example_pool,
            key.repetition,
        )?;
        let model_idx = models[key.model.as_str()];
        queues
            .entry(experiment.models[model_idx].backend)
            .or_default()
            .push(Job { key, model_idx, bundle });
    }

    let header = LogHeader {
        tool_version: crate::TOOL_VERSION.to_string(),
        sampling: "backend default temperature and sampling parameters".into(),
        context_window_tokens: config.context_window_tokens,
        max_response_tokens: config.max_response_tokens,
        created_utc: chrono::Utc::now().timestamp(),
    };
    let mut writer = LogWriter::open(log_path, &header)?;
    let mut summary = RunSummary {
        total_cells: total,
        already_present,
        ..RunSummary::default()
    };
    on_progress(Progress {
        done: already_present,
        total,
        failures: 0,
    });

    let abort = AtomicBool::new(false);
    let result = std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<RawResponse>();
        for (kind, jobs) in &queues {
            let backend: &dyn ChatBackend = backends.get(*kind).expect("checked above").as_ref();
            let next = Arc::new(AtomicUsize::new(0));
            for _ in 0..config.max_in_flight.max(1).min(jobs.len()) {
                let tx = tx.clone();
                let next = Arc::clone(&next);
                let abort = &abort;
                scope.spawn(move || loop {
                    if abort.load(Ordering::Relaxed) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(job) = jobs.get(i) else { break };
                    let row = execute(job, &experiment.models[job.model_idx], backend, config);
                    if tx.send(row).is_err() {
                        break;
                    }
                });
            }
        }
        drop(tx);
        for row in rx {
            if let Err(e) = writer.append(&row) {
                abort.store(true, Ordering::Relaxed);
                return Err(e);
            }
            summary.written += 1;
            if row.is_failure() {
                summary.failures += 1;
            }
            on_progress(Progress {
                done: summary.already_present + summary.written,
                total,
                failures: summary.failures,
            });
        }
        Ok(())
    });
    result.map(|()| summary)
}

fn execute(job: &Job, model: &ModelSpec, backend: &dyn ChatBackend, config: &RunConfig) -> RawResponse {
    let request = ChatRequest {
        model: &model.name,
        system: &job.bundle.system_text,
        user: &job.bundle.user_text,
        cell: Some(&job.key),
    };
    let started = Instant::now();
    let outcome = complete(backend, &request, config);
    let latency_ms = started.elapsed().as_millis() as u64;
    let (text, error, attempts) = match outcome {
        Ok(c) => (Some(c.text), None, c.attempts),
        Err(f) => (
            None,
            Some(FailureInfo {
                class: f.error.class,
                status: f.error.status,
                message: f.error.message,
            }),
            f.attempts,
        ),
    };
    RawResponse {
        model: job.key.model.clone(),
        strategy: job.key.strategy.clone(),
        submission_id: job.key.submission_id.clone(),
        repetition: job.key.repetition,
        text,
        error,
        attempts,
        latency_ms,
        timestamp: chrono::Utc::now().timestamp_millis(),
        prompt_hash: job.bundle.prompt_hash(),
    }
}
