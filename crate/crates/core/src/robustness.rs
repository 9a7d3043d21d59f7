//! Post-cutoff dataset construction and the fixed-pool sensitivity loop.
//!
//! The dataset builder works on a raw forum dump: keyword and comment-score
//! filters pick candidate requests, an expert model tags the movies in each
//! candidate, and the tagged candidates are turned into the corpus file
//! formats. The pool loop re-asks a model until it has named ten movies from
//! a fixed pool.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{Catalog, CatalogEntry, GoldRecord, MovieId, Submission};
use crate::jsonl;
use crate::matching::{MatchMode, TitleIndex};
use crate::parsing::{self, ParseOptions, TitleYear};
use crate::prompting::{escape_tag_text, user_prompt_from_parts, PromptBundle};
use crate::runner::{complete, ChatBackend, ChatRequest, CompletionError, RunConfig};
use crate::seed;

/// System prompt for the expert tagger.
pub const TAGGER_PROMPT: &str = include_str!("../assets/prompts/tagger.txt");

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("invalid filter rules: {0}")]
    InvalidRules(String),
    #[error("movie pool is empty")]
    EmptyPool,
}

impl RobustnessError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        RobustnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A submission record of the raw dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSubmission {
    pub id: String,
    pub created_utc: i64,
    pub title: String,
    #[serde(default)]
    pub selftext: String,
}

/// A comment record of the raw dump; `score` is the net vote count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawComment {
    pub id: String,
    /// Parent submission as a fullname (`t3_<id>`) or bare id.
    pub link_id: String,
    #[serde(default)]
    pub body: String,
    pub score: i64,
}

impl RawComment {
    pub fn submission_id(&self) -> &str {
        self.link_id.strip_prefix("t3_").unwrap_or(&self.link_id)
    }
}

/// Submissions with their comments grouped by submission id.
#[derive(Debug, Clone, Default)]
pub struct RawDump {
    pub submissions: Vec<RawSubmission>,
    pub comments: HashMap<String, Vec<RawComment>>,
}

impl RawDump {
    pub fn new(submissions: Vec<RawSubmission>, comments: Vec<RawComment>) -> Self {
        let mut grouped: HashMap<String, Vec<RawComment>> = HashMap::new();
        for c in comments {
            grouped.entry(c.submission_id().to_string()).or_default().push(c);
        }
        Self {
            submissions,
            comments: grouped,
        }
    }

    pub fn load(submissions: &Path, comments: &Path) -> Result<Self, RobustnessError> {
        Ok(Self::new(read_records(submissions)?, read_records(comments)?))
    }
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, RobustnessError> {
    let lines = jsonl::read_lines(path).map_err(|e| RobustnessError::io(path, e))?;
    lines
        .iter()
        .map(|l| {
            serde_json::from_str(&l.text).map_err(|e| RobustnessError::Malformed {
                path: path.to_path_buf(),
                line: l.number,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    /// Inclusive range of `created_utc`.
    pub date_range: Option<(i64, i64)>,
    /// Case-insensitive substring required in the title.
    pub keyword: String,
    /// Comments with net score ≥ 1 a submission needs.
    pub min_positive_comments: usize,
    /// Distinct recommended movies a labeled candidate needs.
    pub min_recommendations: usize,
    pub require_movies_in_request: bool,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            date_range: None,
            keyword: "request".into(),
            min_positive_comments: 5,
            min_recommendations: 10,
            require_movies_in_request: true,
        }
    }
}

impl FilterRules {
    pub fn validate(&self) -> Result<(), RobustnessError> {
        if self.keyword.trim().is_empty() {
            return Err(RobustnessError::InvalidRules("keyword is empty".into()));
        }
        if self.min_positive_comments == 0 || self.min_recommendations == 0 {
            return Err(RobustnessError::InvalidRules("thresholds must be positive".into()));
        }
        if let Some((lo, hi)) = self.date_range {
            if lo > hi {
                return Err(RobustnessError::InvalidRules(format!("date range {lo}..{hi} is reversed")));
            }
        }
        Ok(())
    }
}

/// A submission that passed the dump filters, with its upvoted comments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub submission: RawSubmission,
    pub comments: Vec<RawComment>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub n_raw: usize,
    pub n_in_range: usize,
    pub n_keyword: usize,
    pub n_candidates: usize,
}

/// Keeps submissions in the date range whose title contains the keyword and
/// that have enough positively scored comments. Output is sorted by
/// (created_utc, id); comments keep dump order.
pub fn filter_candidates(dump: &RawDump, rules: &FilterRules) -> (Vec<Candidate>, FilterReport) {
    let keyword = rules.keyword.to_lowercase();
    let mut report = FilterReport {
        n_raw: dump.submissions.len(),
        ..FilterReport::default()
    };
    let mut out = Vec::new();
    for s in &dump.submissions {
        if let Some((lo, hi)) = rules.date_range {
            if s.created_utc < lo || s.created_utc > hi {
                continue;
            }
        }
        report.n_in_range += 1;
        if !s.title.to_lowercase().contains(&keyword) {
            continue;
        }
        report.n_keyword += 1;
        let positive: Vec<RawComment> = dump
            .comments
            .get(&s.id)
            .into_iter()
            .flatten()
            .filter(|c| c.score >= 1)
            .cloned()
            .collect();
        if positive.len() < rules.min_positive_comments {
            continue;
        }
        out.push(Candidate {
            submission: s.clone(),
            comments: positive,
        });
    }
    out.sort_by(|a, b| {
        (a.submission.created_utc, &a.submission.id).cmp(&(b.submission.created_utc, &b.submission.id))
    });
    report.n_candidates = out.len();
    (out, report)
}

/// User prompt sent to the tagger for one candidate.
pub fn tagger_user_prompt(candidate: &Candidate) -> String {
    let mut text = user_prompt_from_parts(&candidate.submission.title, &candidate.submission.selftext);
    for c in &candidate.comments {
        text.push_str("\n<comment>");
        text.push_str(&escape_tag_text(&c.body));
        text.push_str("</comment>");
    }
    text
}

/// Movies tagged by the expert, as `Title (Year)` strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertLabels {
    pub request_movies: Vec<String>,
    pub recommendations: Vec<String>,
}

/// Reads a tagger reply; `Err` carries the reason it needs manual review.
pub fn parse_expert_reply(raw: &str) -> Result<ExpertLabels, String> {
    let doc = parsing::extract_json(raw).ok_or("reply contains no JSON object")?;
    let list = |key: &str| -> Result<Vec<String>, String> {
        match doc.get(key) {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| v.as_str().map(|s| s.trim().to_string()).ok_or(format!("`{key}` holds a non-string")))
                .collect(),
            Some(_) => Err(format!("`{key}` is not an array")),
            None => Err(format!("`{key}` is missing")),
        }
    };
    Ok(ExpertLabels {
        request_movies: list("request_movies")?,
        recommendations: list("recommendations")?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledCandidate {
    pub submission_id: String,
    pub content_hash: String,
    pub labels: Option<ExpertLabels>,
    /// Why the candidate needs a human look; set whenever `labels` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheLine {
    content_hash: String,
    reply: String,
}

/// Expert replies keyed by the hash of (model, system prompt, user prompt),
/// optionally persisted as JSONL.
#[derive(Debug, Default)]
pub struct LabelCache {
    replies: HashMap<String, String>,
    path: Option<PathBuf>,
}

impl LabelCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens a cache file, creating it on first insert.
    pub fn open(path: &Path) -> Result<Self, RobustnessError> {
        let mut cache = Self {
            replies: HashMap::new(),
            path: Some(path.to_path_buf()),
        };
        if path.exists() {
            for line in read_records::<CacheLine>(path)? {
                cache.replies.entry(line.content_hash).or_insert(line.reply);
            }
        }
        Ok(cache)
    }

    pub fn get(&self, hash: &str) -> Option<&str> {
        self.replies.get(hash).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }

    pub fn insert(&mut self, hash: String, reply: String) -> Result<(), RobustnessError> {
        if self.replies.contains_key(&hash) {
            return Ok(());
        }
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&CacheLine {
                content_hash: hash.clone(),
                reply: reply.clone(),
            })
            .expect("cache line serializes");
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| RobustnessError::io(path, e))?;
            writeln!(file, "{line}").map_err(|e| RobustnessError::io(path, e))?;
        }
        self.replies.insert(hash, reply);
        Ok(())
    }
}

fn labeled(submission_id: &str, hash: String, reply: Result<String, CompletionError>) -> LabeledCandidate {
    let (labels, review) = match reply {
        Ok(text) => match parse_expert_reply(&text) {
            Ok(l) => (Some(l), None),
            Err(reason) => (None, Some(reason)),
        },
        Err(e) => (None, Some(format!("expert request failed: {e}"))),
    };
    LabeledCandidate {
        submission_id: submission_id.to_string(),
        content_hash: hash,
        labels,
        review,
    }
}

/// Tags one candidate, consulting and filling the cache.
pub fn label_with_expert(
    candidate: &Candidate,
    model: &str,
    backend: &dyn ChatBackend,
    config: &RunConfig,
    cache: &mut LabelCache,
) -> Result<LabeledCandidate, RobustnessError> {
    Ok(label_all(std::slice::from_ref(candidate), model, backend, config, cache)?.remove(0))
}

/// Tags all candidates with at most `config.max_in_flight` requests in
/// flight. Output order follows `candidates`. Failed requests are flagged
/// for review and not cached.
pub fn label_all(
    candidates: &[Candidate],
    model: &str,
    backend: &dyn ChatBackend,
    config: &RunConfig,
    cache: &mut LabelCache,
) -> Result<Vec<LabeledCandidate>, RobustnessError> {
    let prompts: Vec<(String, String)> = candidates
        .iter()
        .map(|c| {
            let user = tagger_user_prompt(c);
            (seed::content_hash(&[model, TAGGER_PROMPT, &user]), user)
        })
        .collect();
    let missing: Vec<usize> = {
        let mut seen = HashSet::new();
        (0..candidates.len())
            .filter(|&i| cache.get(&prompts[i].0).is_none() && seen.insert(prompts[i].0.clone()))
            .collect()
    };

    let fetched: Mutex<HashMap<usize, Result<String, CompletionError>>> = Mutex::new(HashMap::new());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..config.max_in_flight.max(1).min(missing.len()) {
            scope.spawn(|| loop {
                let Some(&i) = missing.get(next.fetch_add(1, Ordering::Relaxed)) else {
                    break;
                };
                let request = ChatRequest {
                    model,
                    system: TAGGER_PROMPT,
                    user: &prompts[i].1,
                    cell: None,
                };
                let reply = complete(backend, &request, config).map(|c| c.text).map_err(|f| f.error);
                fetched.lock().expect("label workers do not panic").insert(i, reply);
            });
        }
    });
    let mut fetched = fetched.into_inner().expect("label workers do not panic");

    let mut failed: HashMap<String, CompletionError> = HashMap::new();
    for i in missing {
        match fetched.remove(&i).expect("every missing prompt was sent") {
            Ok(text) => cache.insert(prompts[i].0.clone(), text)?,
            Err(e) => {
                failed.insert(prompts[i].0.clone(), e);
            }
        }
    }
    Ok(candidates
        .iter()
        .zip(prompts)
        .map(|(c, (hash, _))| {
            let reply = match cache.get(&hash) {
                Some(text) => Ok(text.to_string()),
                None => Err(failed[&hash].clone()),
            };
            labeled(&c.submission.id, hash, reply)
        })
        .collect())
}

/// Why a labeled candidate was left out of the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Dropped {
    NeedsReview { detail: String },
    NoRequestMovies,
    TooFewRecommendations { distinct: usize, min: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedCandidate {
    pub submission_id: String,
    #[serde(flatten)]
    pub reason: Dropped,
}

/// The finished dataset in corpus form.
#[derive(Debug, Clone, Default)]
pub struct FinalDataset {
    pub submissions: Vec<Submission>,
    pub gold: Vec<GoldRecord>,
    pub catalog: Catalog,
    pub dropped: Vec<DroppedCandidate>,
}

impl FinalDataset {
    pub fn write(&self, dir: &Path) -> Result<(), crate::corpus::CorpusError> {
        crate::corpus::write_submissions(&dir.join("submissions.jsonl"), &self.submissions)?;
        crate::corpus::write_gold(&dir.join("gold.jsonl"), &self.gold)?;
        crate::corpus::write_catalog(&dir.join("catalog.jsonl"), &self.catalog)
    }
}

/// Resolves `Title (Year)` strings to catalog ids, inventing ids for titles
/// the reference catalog lacks.
struct Resolver<'a> {
    index: Option<TitleIndex>,
    reference: Option<&'a Catalog>,
    max_year: i32,
    out: Catalog,
}

impl<'a> Resolver<'a> {
    fn new(reference: Option<&'a Catalog>) -> Self {
        Self {
            index: reference.map(|c| TitleIndex::new(c.iter())),
            reference,
            max_year: chrono::Utc::now().format("%Y").to_string().parse().unwrap_or(i32::MAX),
            out: Catalog::new(),
        }
    }

    fn resolve(&mut self, raw: &str) -> Option<MovieId> {
        let ty = parsing::parse_title_year(raw)?;
        if ty.year > self.max_year {
            return None;
        }
        if let (Some(index), Some(reference)) = (&self.index, self.reference) {
            if let Some(m) = index.match_entry(&ty, MatchMode::Exact) {
                if let Some(entry) = reference.get(m.movie_id.as_str()) {
                    self.out.insert(entry.clone());
                }
                return Some(m.movie_id);
            }
        }
        Some(self.synthesize(&ty))
    }

    fn synthesize(&mut self, ty: &TitleYear) -> MovieId {
        let hash = seed::content_hash(&[&ty.key()]);
        let id = MovieId(format!("x{}", &hash[..12]));
        if !self.out.contains(id.as_str()) {
            self.out.insert(CatalogEntry {
                movie_id: id.clone(),
                release_year: ty.year,
                aliases: vec![ty.title.clone()],
            });
        }
        id
    }
}

/// Turns labeled candidates into corpus records. Candidates without request
/// movies or with fewer than `min_recommendations` distinct recommended
/// movies outside the request are dropped. With a reference catalog, titles
/// resolve to its ids by exact alias and year; other titles get a stable
/// local id derived from the normalized `title (year)` key.
pub fn finalize_dataset(
    candidates: &[Candidate],
    labels: &[LabeledCandidate],
    reference: Option<&Catalog>,
    rules: &FilterRules,
) -> FinalDataset {
    let by_id: HashMap<&str, &LabeledCandidate> = labels.iter().map(|l| (l.submission_id.as_str(), l)).collect();
    let mut resolver = Resolver::new(reference);
    let mut dataset = FinalDataset::default();
    for c in candidates {
        let id = &c.submission.id;
        let drop = |reason| DroppedCandidate {
            submission_id: id.clone(),
            reason,
        };
        let Some(labels) = by_id.get(id.as_str()).and_then(|l| l.labels.as_ref().map(|x| (l, x))) else {
            let detail = by_id
                .get(id.as_str())
                .and_then(|l| l.review.clone())
                .unwrap_or_else(|| "not labeled".into());
            dataset.dropped.push(drop(Dropped::NeedsReview { detail }));
            continue;
        };
        let (_, labels) = labels;
        let request: BTreeSet<MovieId> = labels.request_movies.iter().filter_map(|t| resolver.resolve(t)).collect();
        if rules.require_movies_in_request && request.is_empty() {
            dataset.dropped.push(drop(Dropped::NoRequestMovies));
            continue;
        }
        let recs: Vec<MovieId> = labels.recommendations.iter().filter_map(|t| resolver.resolve(t)).collect();
        let distinct = recs.iter().filter(|m| !request.contains(*m)).collect::<BTreeSet<_>>().len();
        if distinct < rules.min_recommendations {
            dataset.dropped.push(drop(Dropped::TooFewRecommendations {
                distinct,
                min: rules.min_recommendations,
            }));
            continue;
        }
        dataset.submissions.push(Submission {
            id: id.clone(),
            created_utc: c.submission.created_utc,
            title: c.submission.title.clone(),
            body: c.submission.selftext.clone(),
            pos_movies: request,
            neg_movies: BTreeSet::new(),
            pos_keywords: BTreeSet::new(),
            neg_keywords: BTreeSet::new(),
            genres: BTreeSet::new(),
        });
        dataset.gold.push(GoldRecord {
            submission_id: id.clone(),
            movie_ids: recs,
            n_comments: Some(c.comments.len() as u64),
        });
    }
    dataset.catalog = resolver.out;
    dataset
}

/// A fixed set of movies the sensitivity run draws from.
pub struct MoviePool {
    catalog: Catalog,
    index: TitleIndex,
}

impl MoviePool {
    pub fn new(catalog: Catalog) -> Result<Self, RobustnessError> {
        if catalog.is_empty() {
            return Err(RobustnessError::EmptyPool);
        }
        let index = TitleIndex::new(catalog.iter());
        Ok(Self { catalog, index })
    }

    pub fn len(&self) -> usize {
        self.catalog.len()
    }

    pub fn is_empty(&self) -> bool {
        self.catalog.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.catalog.contains(id)
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub max_iterations: u32,
    pub target: usize,
    pub mode: MatchMode,
    pub parse: ParseOptions,
    /// Base seed for list capping inside each iteration.
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            target: 10,
            mode: MatchMode::Exact,
            parse: ParseOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolOutcome {
    pub submission_id: String,
    /// Distinct in-pool ids in first-seen order, at most `target` long.
    pub ids: Vec<MovieId>,
    pub iterations: u32,
    pub shortfall: bool,
    /// Iterations whose request failed after retries.
    pub failed_requests: u32,
}

/// Repeats `bundle` against `model` until `target` distinct in-pool movies
/// have been named or `max_iterations` requests were made.
pub fn constrain_to_pool(
    bundle: &PromptBundle,
    model: &str,
    pool: &MoviePool,
    backend: &dyn ChatBackend,
    run: &RunConfig,
    config: &PoolConfig,
) -> PoolOutcome {
    let mut ids: Vec<MovieId> = Vec::new();
    let mut seen: HashSet<MovieId> = HashSet::new();
    let mut iterations = 0;
    let mut failed_requests = 0;
    let request = ChatRequest {
        model,
        system: &bundle.system_text,
        user: &bundle.user_text,
        cell: None,
    };
    while ids.len() < config.target && iterations < config.max_iterations {
        iterations += 1;
        let text = match complete(backend, &request, run) {
            Ok(c) => c.text,
            Err(f) => {
                log::warn!("{}: pool iteration {iterations} failed: {}", bundle.submission_id, f.error);
                failed_requests += 1;
                continue;
            }
        };
        let parse_seed = seed::derive(config.seed, &["pool", &bundle.submission_id, &iterations.to_string()]);
        let parsed = parsing::parse_response(&text, parse_seed, config.parse);
        for id in pool.index.match_list(&parsed, config.mode).matched() {
            if ids.len() == config.target {
                break;
            }
            if seen.insert(id.clone()) {
                ids.push(id.clone());
            }
        }
    }
    PoolOutcome {
        submission_id: bundle.submission_id.clone(),
        shortfall: ids.len() < config.target,
        ids,
        iterations,
        failed_requests,
    }
}

/// Counts of each pipeline stage, for the build manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub filter: FilterReport,
    pub labeled: usize,
    pub needs_review: usize,
    pub final_submissions: usize,
    pub dropped: BTreeMap<String, usize>,
}

impl BuildReport {
    pub fn new(filter: FilterReport, labels: &[LabeledCandidate], dataset: &FinalDataset) -> Self {
        let mut dropped = BTreeMap::new();
        for d in &dataset.dropped {
            let key = match d.reason {
                Dropped::NeedsReview { .. } => "needs_review",
                Dropped::NoRequestMovies => "no_request_movies",
                Dropped::TooFewRecommendations { .. } => "too_few_recommendations",
            };
            *dropped.entry(key.to_string()).or_insert(0) += 1;
        }
        Self {
            filter,
            labeled: labels.iter().filter(|l| l.labels.is_some()).count(),
            needs_review: labels.iter().filter(|l| l.labels.is_none()).count(),
            final_submissions: dataset.submissions.len(),
            dropped,
        }
    }
}
