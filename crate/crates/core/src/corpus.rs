//! Annotated requests, community gold sets and the multilingual catalog.
//!
//! Three line-delimited files make up a dataset:
//!
//! ```text
//! submissions.jsonl  {"id","created_utc","title","body","pos_movies":[],"neg_movies":[],
//!                     "pos_keywords":[],"neg_keywords":[],"genres":[]}
//! gold.jsonl         {"submission_id","movie_ids":[],"n_comments"?}
//! catalog.jsonl      {"movie_id","year","aliases":[]}
//! ```
//!
//! A gold line lists every community recommendation instance for a request,
//! repeats included. Several lines for the same submission are concatenated.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::Datelike;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, FieldError, Fields};

/// Earliest release year accepted anywhere in the harness.
pub const MIN_RELEASE_YEAR: i32 = 1870;

/// Gold sets smaller than this are excluded from evaluation.
pub const DEFAULT_MIN_GOLD: usize = 10;

/// External movie-database identifier (e.g. an IMDb `tt` id).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MovieId(pub String);

impl MovieId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MovieId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for MovieId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for MovieId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// One narrative recommendation request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub id: String,
    pub created_utc: i64,
    pub title: String,
    pub body: String,
    pub pos_movies: BTreeSet<MovieId>,
    #[serde(default)]
    pub neg_movies: BTreeSet<MovieId>,
    #[serde(default)]
    pub pos_keywords: BTreeSet<String>,
    #[serde(default)]
    pub neg_keywords: BTreeSet<String>,
    #[serde(default)]
    pub genres: BTreeSet<String>,
}

impl Submission {
    /// Calendar year (UTC) the request was posted in.
    pub fn year(&self) -> i32 {
        chrono::DateTime::from_timestamp(self.created_utc, 0)
            .map(|dt| dt.year())
            .unwrap_or(1970)
    }

    /// Movies mentioned in the request, liked or not.
    pub fn mentioned(&self) -> impl Iterator<Item = &MovieId> {
        self.pos_movies.iter().chain(self.neg_movies.iter())
    }
}

/// A movie with every known title.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub movie_id: MovieId,
    #[serde(rename = "year")]
    pub release_year: i32,
    pub aliases: Vec<String>,
}

/// Movie lookup by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    entries: BTreeMap<MovieId, CatalogEntry>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry, returning the previous one with the same id.
    pub fn insert(&mut self, entry: CatalogEntry) -> Option<CatalogEntry> {
        self.entries.insert(entry.movie_id.clone(), entry)
    }

    pub fn get(&self, id: &str) -> Option<&CatalogEntry> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.entries.values()
    }

    /// Entries for the given ids that exist in the catalog.
    pub fn select<'a, I>(&'a self, ids: I) -> impl Iterator<Item = &'a CatalogEntry>
    where
        I: IntoIterator<Item = &'a MovieId>,
    {
        ids.into_iter().filter_map(|id| self.entries.get(id))
    }
}

impl FromIterator<CatalogEntry> for Catalog {
    fn from_iter<T: IntoIterator<Item = CatalogEntry>>(iter: T) -> Self {
        let mut catalog = Catalog::new();
        for entry in iter {
            catalog.insert(entry);
        }
        catalog
    }
}

/// Community recommendations for one request as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub submission_id: String,
    pub movie_ids: Vec<MovieId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_comments: Option<u64>,
}

/// Relevant movies for one request after removing anything the requester
/// already mentioned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSet {
    pub submission_id: String,
    pub items: BTreeSet<MovieId>,
    /// Recommendation instances before deduplication and filtering.
    pub raw_count: usize,
}

impl GoldSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.items.contains(id)
    }
}

/// Why a submission was left out of evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Ineligible {
    /// No gold line references the submission.
    NoGold,
    /// Every community recommendation was already mentioned in the request.
    EmptyGold,
    TooFewGold { size: usize, min: usize },
}

impl fmt::Display for Ineligible {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ineligible::NoGold => f.write_str("no gold"),
            Ineligible::EmptyGold => f.write_str("empty gold"),
            Ineligible::TooFewGold { size, min } => {
                write!(f, "gold size {size} below minimum {min}")
            }
        }
    }
}

/// One line of the eligibility manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub submission_id: String,
    #[serde(flatten)]
    pub reason: Ineligible,
}

/// Headline counts for a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_submissions: usize,
    pub n_unique_mentioned: usize,
    pub n_comments: u64,
    pub n_distinct_suggested: usize,
    pub n_recommendations: usize,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: field `{field}`: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("{path}: duplicate id `{id}` on lines {first_line} and {second_line}")]
    DuplicateId {
        path: PathBuf,
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("{path}:{line}: submission `{id}` has no positively mentioned movies")]
    EmptyPositives { path: PathBuf, line: usize, id: String },
    #[error("{path}:{line}: catalog entry `{id}` has no aliases")]
    NoAliases { path: PathBuf, line: usize, id: String },
    #[error("{path}:{line}: release year {year} of `{id}` outside {MIN_RELEASE_YEAR}..={max}")]
    YearOutOfRange {
        path: PathBuf,
        line: usize,
        id: String,
        year: i64,
        max: i32,
    },
    #[error("submission `{id}` posted at {created_utc} lies outside the declared date range {start}..={end}")]
    OutsideDateRange {
        id: String,
        created_utc: i64,
        start: i64,
        end: i64,
    },
    #[error("gold set of `{submission_id}` references movie `{movie_id}` missing from the catalog")]
    UnknownMovie {
        submission_id: String,
        movie_id: MovieId,
    },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn field(path: &Path, line: usize, err: FieldError) -> Self {
        CorpusError::Malformed {
            path: path.to_path_buf(),
            line,
            field: err.field,
            message: err.message,
        }
    }
}

fn parse_line(path: &Path, line: &jsonl::Line) -> Result<serde_json::Value, CorpusError> {
    serde_json::from_str(&line.text).map_err(|e| CorpusError::Malformed {
        path: path.to_path_buf(),
        line: line.number,
        field: "<record>".into(),
        message: e.to_string(),
    })
}

fn id_set(values: Vec<String>) -> BTreeSet<MovieId> {
    values.into_iter().map(MovieId).collect()
}

/// Loads submissions sorted by posting time (ties by id).
pub fn load_submissions(path: &Path) -> Result<Vec<Submission>, CorpusError> {
    let lines = jsonl::read_lines(path).map_err(|e| CorpusError::io(path, e))?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::with_capacity(lines.len());
    for line in &lines {
        let value = parse_line(path, line)?;
        let err = |e| CorpusError::field(path, line.number, e);
        let f = Fields::of(&value).map_err(err)?;
        let submission = Submission {
            id: f.string("id").map_err(err)?,
            created_utc: f.integer("created_utc").map_err(err)?,
            title: f.string("title").map_err(err)?,
            body: f.string("body").map_err(err)?,
            pos_movies: id_set(f.required_string_list("pos_movies").map_err(err)?),
            neg_movies: id_set(f.string_list("neg_movies").map_err(err)?),
            pos_keywords: f.string_list("pos_keywords").map_err(err)?.into_iter().collect(),
            neg_keywords: f.string_list("neg_keywords").map_err(err)?.into_iter().collect(),
            genres: f.string_list("genres").map_err(err)?.into_iter().collect(),
        };
        if let Some(&first_line) = seen.get(&submission.id) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                id: submission.id,
                first_line,
                second_line: line.number,
            });
        }
        if submission.pos_movies.is_empty() {
            return Err(CorpusError::EmptyPositives {
                path: path.to_path_buf(),
                line: line.number,
                id: submission.id,
            });
        }
        seen.insert(submission.id.clone(), line.number);
        out.push(submission);
    }
    out.sort_by(|a, b| (a.created_utc, &a.id).cmp(&(b.created_utc, &b.id)));
    Ok(out)
}

/// Loads the title catalog.
pub fn load_catalog(path: &Path) -> Result<Catalog, CorpusError> {
    let max_year = chrono::Utc::now().year();
    let lines = jsonl::read_lines(path).map_err(|e| CorpusError::io(path, e))?;
    let mut seen: HashMap<MovieId, usize> = HashMap::new();
    let mut catalog = Catalog::new();
    for line in &lines {
        let value = parse_line(path, line)?;
        let err = |e| CorpusError::field(path, line.number, e);
        let f = Fields::of(&value).map_err(err)?;
        let movie_id = MovieId(f.string("movie_id").map_err(err)?);
        let year = f.integer("year").map_err(err)?;
        let aliases = f.required_string_list("aliases").map_err(err)?;
        if let Some(&first_line) = seen.get(&movie_id) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                id: movie_id.0,
                first_line,
                second_line: line.number,
            });
        }
        if aliases.iter().all(|a| a.trim().is_empty()) {
            return Err(CorpusError::NoAliases {
                path: path.to_path_buf(),
                line: line.number,
                id: movie_id.0,
            });
        }
        if year < MIN_RELEASE_YEAR as i64 || year > max_year as i64 {
            return Err(CorpusError::YearOutOfRange {
                path: path.to_path_buf(),
                line: line.number,
                id: movie_id.0,
                year,
                max: max_year,
            });
        }
        seen.insert(movie_id.clone(), line.number);
        catalog.insert(CatalogEntry {
            movie_id,
            release_year: year as i32,
            aliases: aliases.into_iter().filter(|a| !a.trim().is_empty()).collect(),
        });
    }
    Ok(catalog)
}

/// Loads gold lines, concatenating repeated submission ids in file order.
pub fn load_gold(path: &Path) -> Result<Vec<GoldRecord>, CorpusError> {
    let lines = jsonl::read_lines(path).map_err(|e| CorpusError::io(path, e))?;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<GoldRecord> = Vec::new();
    for line in &lines {
        let value = parse_line(path, line)?;
        let err = |e| CorpusError::field(path, line.number, e);
        let f = Fields::of(&value).map_err(err)?;
        let submission_id = f.string("submission_id").map_err(err)?;
        let movie_ids: Vec<MovieId> = f
            .required_string_list("movie_ids")
            .map_err(err)?
            .into_iter()
            .map(MovieId)
            .collect();
        let n_comments = match f.optional_integer("n_comments").map_err(err)? {
            Some(n) if n < 0 => {
                return Err(CorpusError::Malformed {
                    path: path.to_path_buf(),
                    line: line.number,
                    field: "n_comments".into(),
                    message: format!("negative count {n}"),
                })
            }
            other => other.map(|n| n as u64),
        };
        match index.get(&submission_id) {
            Some(&i) => {
                let record = &mut out[i];
                record.movie_ids.extend(movie_ids);
                record.n_comments = match (record.n_comments, n_comments) {
                    (None, None) => None,
                    (a, b) => Some(a.unwrap_or(0) + b.unwrap_or(0)),
                };
            }
            None => {
                index.insert(submission_id.clone(), out.len());
                out.push(GoldRecord {
                    submission_id,
                    movie_ids,
                    n_comments,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_submissions(path: &Path, submissions: &[Submission]) -> Result<(), CorpusError> {
    jsonl::write_all(path, submissions).map_err(|e| CorpusError::io(path, e))
}

pub fn write_catalog(path: &Path, catalog: &Catalog) -> Result<(), CorpusError> {
    jsonl::write_all(path, catalog.iter()).map_err(|e| CorpusError::io(path, e))
}

pub fn write_gold(path: &Path, gold: &[GoldRecord]) -> Result<(), CorpusError> {
    jsonl::write_all(path, gold).map_err(|e| CorpusError::io(path, e))
}

/// Derives the gold set of one request: community recommendations minus
/// everything the requester mentioned, positively or negatively.
pub fn build_gold(submission: &Submission, community_recs: &[MovieId]) -> Result<GoldSet, Ineligible> {
    let mentioned: BTreeSet<&MovieId> = submission.mentioned().collect();
    let items: BTreeSet<MovieId> = community_recs
        .iter()
        .filter(|id| !mentioned.contains(id))
        .cloned()
        .collect();
    if items.is_empty() {
        return Err(Ineligible::EmptyGold);
    }
    Ok(GoldSet {
        submission_id: submission.id.clone(),
        items,
        raw_count: community_recs.len(),
    })
}

/// Counts by direct enumeration over the given submissions and their gold
/// records. Gold records for other submissions are ignored.
pub fn dataset_stats(submissions: &[Submission], gold: &[GoldRecord]) -> DatasetStats {
    let ids: BTreeSet<&str> = submissions.iter().map(|s| s.id.as_str()).collect();
    let mentioned: BTreeSet<&MovieId> = submissions.iter().flat_map(|s| s.mentioned()).collect();
    let mut suggested: BTreeSet<&MovieId> = BTreeSet::new();
    let mut n_comments = 0;
    let mut n_recommendations = 0;
    for record in gold.iter().filter(|g| ids.contains(g.submission_id.as_str())) {
        suggested.extend(record.movie_ids.iter());
        n_comments += record.n_comments.unwrap_or(0);
        n_recommendations += record.movie_ids.len();
    }
    DatasetStats {
        n_submissions: submissions.len(),
        n_unique_mentioned: mentioned.len(),
        n_comments,
        n_distinct_suggested: suggested.len(),
        n_recommendations,
    }
}

/// Admission rules applied when assembling a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusOptions {
    pub min_gold: usize,
    /// Inclusive `created_utc` bounds every submission must respect.
    pub date_range: Option<(i64, i64)>,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            min_gold: DEFAULT_MIN_GOLD,
            date_range: None,
        }
    }
}

/// A loaded, validated dataset. Immutable once assembled.
#[derive(Debug, Clone)]
pub struct Corpus {
    /// Every loaded submission, admitted or not, sorted by posting time.
    pub all_submissions: Vec<Submission>,
    /// Submissions admitted to evaluation, sorted by posting time.
    pub submissions: Vec<Submission>,
    pub gold: BTreeMap<String, GoldSet>,
    pub gold_records: Vec<GoldRecord>,
    pub catalog: Catalog,
    pub exclusions: Vec<Exclusion>,
}

impl Corpus {
    /// Cross-validates the three inputs and applies the admission rules.
    pub fn assemble(
        submissions: Vec<Submission>,
        gold_records: Vec<GoldRecord>,
        catalog: Catalog,
        options: &CorpusOptions,
    ) -> Result<Self, CorpusError> {
        if let Some((start, end)) = options.date_range {
            if let Some(s) = submissions
                .iter()
                .find(|s| s.created_utc < start || s.created_utc > end)
            {
                return Err(CorpusError::OutsideDateRange {
                    id: s.id.clone(),
                    created_utc: s.created_utc,
                    start,
                    end,
                });
            }
        }
        let by_id: HashMap<&str, &GoldRecord> = gold_records
            .iter()
            .map(|g| (g.submission_id.as_str(), g))
            .collect();
        let mut admitted = Vec::new();
        let mut gold = BTreeMap::new();
        let mut exclusions = Vec::new();
        for submission in &submissions {
            let Some(record) = by_id.get(submission.id.as_str()) else {
                exclusions.push(Exclusion {
                    submission_id: submission.id.clone(),
                    reason: Ineligible::NoGold,
                });
                continue;
            };
            if let Some(missing) = record.movie_ids.iter().find(|id| !catalog.contains(id.as_str())) {
                return Err(CorpusError::UnknownMovie {
                    submission_id: submission.id.clone(),
                    movie_id: missing.clone(),
                });
            }
            let outcome = build_gold(submission, &record.movie_ids).and_then(|g| {
                if g.len() < options.min_gold {
                    Err(Ineligible::TooFewGold {
                        size: g.len(),
                        min: options.min_gold,
                    })
                } else {
                    Ok(g)
                }
            });
            match outcome {
                Ok(g) => {
                    gold.insert(submission.id.clone(), g);
                    admitted.push(submission.clone());
                }
                Err(reason) => {
                    log::info!("excluding submission {}: {reason}", submission.id);
                    exclusions.push(Exclusion {
                        submission_id: submission.id.clone(),
                        reason,
                    });
                }
            }
        }
        Ok(Corpus {
            all_submissions: submissions,
            submissions: admitted,
            gold,
            gold_records,
            catalog,
            exclusions,
        })
    }

    /// Loads and assembles a corpus from the three dataset files.
    pub fn load(
        submissions: &Path,
        gold: &Path,
        catalog: &Path,
        options: &CorpusOptions,
    ) -> Result<Self, CorpusError> {
        let catalog = load_catalog(catalog)?;
        let gold = load_gold(gold)?;
        let submissions = load_submissions(submissions)?;
        Self::assemble(submissions, gold, catalog, options)
    }

    pub fn gold_for(&self, submission_id: &str) -> Option<&GoldSet> {
        self.gold.get(submission_id)
    }

    /// Counts over the admitted submissions.
    pub fn stats(&self) -> DatasetStats {
        dataset_stats(&self.submissions, &self.gold_records)
    }

    /// Community recommendations for a submission ordered by how often they
    /// were suggested (ties by first appearance), mentions removed.
    pub fn ranked_gold(&self, submission_id: &str) -> Vec<MovieId> {
        let Some(gold) = self.gold.get(submission_id) else {
            return Vec::new();
        };
        let Some(record) = self.gold_records.iter().find(|g| g.submission_id == submission_id) else {
            return Vec::new();
        };
        rank_by_frequency(&record.movie_ids)
            .into_iter()
            .filter(|id| gold.items.contains(id))
            .collect()
    }
}

/// Distinct ids ordered by descending frequency, ties by first appearance.
pub fn rank_by_frequency(ids: &[MovieId]) -> Vec<MovieId> {
    let mut counts: Vec<(MovieId, usize, usize)> = Vec::new();
    let mut pos: HashMap<&MovieId, usize> = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        match pos.get(id) {
            Some(&p) => counts[p].1 += 1,
            None => {
                pos.insert(id, counts.len());
                counts.push((id.clone(), 1, i));
            }
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    counts.into_iter().map(|(id, _, _)| id).collect()
}
