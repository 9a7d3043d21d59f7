//! Raw response text to validated recommendation lists, plus the four
//! format-adherence ratios.

use std::collections::HashSet;
use std::fmt;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::MIN_RELEASE_YEAR;
use crate::prompting::LIST_LENGTH;
use crate::stats::bootstrap::{self, BootstrapConfig, Interval};

pub const MAX_RELEASE_YEAR: i32 = 2100;

/// Key under which the prompt asks for the list.
pub const RECOMMENDATIONS_KEY: &str = "recommendations";

/// A `Title (Year)` recommendation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TitleYear {
    pub title: String,
    pub year: i32,
}

impl TitleYear {
    /// Case-insensitive identity used for deduplication and diversity.
    pub fn key(&self) -> String {
        format!("{} ({})", self.title.to_lowercase(), self.year)
    }
}

impl fmt::Display for TitleYear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.title, self.year)
    }
}

fn title_year_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"^(.+) \((\d{4})\)$").expect("valid pattern"))
}

/// Matches a trimmed string against `^(.+) \((\d{4})\)$`.
pub fn parse_title_year(raw: &str) -> Option<TitleYear> {
    let caps = title_year_pattern().captures(raw.trim())?;
    let title = caps[1].trim();
    let year: i32 = caps[2].parse().ok()?;
    if title.is_empty() || !(MIN_RELEASE_YEAR..=MAX_RELEASE_YEAR).contains(&year) {
        return None;
    }
    Some(TitleYear {
        title: title.to_string(),
        year,
    })
}

/// Validated list for one response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedList {
    pub entries: Vec<TitleYear>,
    pub valid_json: bool,
    /// Pattern-conforming entries before deduplication and capping.
    pub n_raw: usize,
    /// Entries left after case-insensitive deduplication, before capping.
    pub n_unique: usize,
    /// Array items that did not match the `Title (Year)` pattern.
    pub n_dropped: usize,
    pub had_exactly_ten: bool,
    pub capped: bool,
}

impl ParsedList {
    /// What a missing or unparsable response contributes.
    pub fn invalid() -> Self {
        Self {
            entries: Vec::new(),
            valid_json: false,
            n_raw: 0,
            n_unique: 0,
            n_dropped: 0,
            had_exactly_ten: false,
            capped: false,
        }
    }
}

/// Returns the first well-formed JSON object in `raw`, tolerating prose and
/// markdown fences around it.
pub fn extract_json(raw: &str) -> Option<Value> {
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(value @ Value::Object(_))) = stream.next() {
            return Some(value);
        }
    }
    None
}

/// Accepts only text that is, after trimming, exactly one JSON object.
pub fn extract_json_strict(raw: &str) -> Option<Value> {
    match serde_json::from_str::<Value>(raw.trim()) {
        Ok(value @ Value::Object(_)) => Some(value),
        _ => None,
    }
}

/// The recommendation array: the `recommendations` member if present,
/// otherwise the first array-valued member.
fn recommendation_array(doc: &Value) -> Option<&Vec<Value>> {
    let obj = doc.as_object()?;
    if let Some(Value::Array(items)) = obj.get(RECOMMENDATIONS_KEY) {
        return Some(items);
    }
    if let Some((_, Value::Array(items))) = obj
        .iter()
        .find(|(k, v)| k.eq_ignore_ascii_case(RECOMMENDATIONS_KEY) && v.is_array())
    {
        return Some(items);
    }
    obj.values().find_map(|v| v.as_array())
}

/// Pattern-matches every item of the recommendation array. Returns the
/// conforming entries and the number of dropped items.
pub fn parse_entries(doc: &Value) -> (Vec<TitleYear>, usize) {
    let Some(items) = recommendation_array(doc) else {
        return (Vec::new(), 0);
    };
    let mut entries = Vec::with_capacity(items.len());
    let mut dropped = 0;
    for item in items {
        match item.as_str().and_then(parse_title_year) {
            Some(ty) => entries.push(ty),
            None => dropped += 1,
        }
    }
    (entries, dropped)
}

/// Case-insensitive dedup keeping first occurrences, then a seeded sample
/// of ten (in original order) when more remain.
pub fn dedup_and_cap(entries: &[TitleYear], seed: u64) -> ParsedList {
    let mut seen = HashSet::new();
    let unique: Vec<TitleYear> = entries.iter().filter(|e| seen.insert(e.key())).cloned().collect();
    let n_unique = unique.len();
    let capped = n_unique > LIST_LENGTH;
    let kept = if capped {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, n_unique, LIST_LENGTH).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| unique[i].clone()).collect()
    } else {
        unique
    };
    ParsedList {
        entries: kept,
        valid_json: true,
        n_raw: entries.len(),
        n_unique,
        n_dropped: 0,
        had_exactly_ten: entries.len() == LIST_LENGTH,
        capped,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOptions {
    /// Disable recovery of JSON wrapped in prose or code fences.
    pub strict: bool,
}

/// Full pipeline for one response: extract, pattern-match, dedup, cap.
pub fn parse_response(raw: &str, seed: u64, options: ParseOptions) -> ParsedList {
    let doc = if options.strict {
        extract_json_strict(raw)
    } else {
        extract_json(raw)
    };
    let Some(doc) = doc else {
        return ParsedList::invalid();
    };
    let (entries, dropped) = parse_entries(&doc);
    let mut list = dedup_and_cap(&entries, seed);
    list.n_dropped = dropped;
    list
}

/// A ratio with its bootstrapped interval and the number of responses it
/// was computed over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub denominator: usize,
}

impl Ratio {
    fn from_values(values: &[f64], config: &BootstrapConfig) -> Ratio {
        if values.is_empty() {
            return Ratio {
                value: 0.0,
                ci_low: 0.0,
                ci_high: 0.0,
                denominator: 0,
            };
        }
        let value = values.iter().sum::<f64>() / values.len() as f64;
        let Interval { low, high } = bootstrap::bootstrap_ci(values, config).expect("non-empty input");
        Ratio {
            value,
            ci_low: low,
            ci_high: high,
            denominator: values.len(),
        }
    }
}

/// Format adherence over a set of responses.
///
/// | ratio | per-response value | responses counted |
/// |---|---|---|
/// | `valid_json` | 1 if JSON was recovered | all |
/// | `exactly_ten` | 1 if ten conforming entries | valid JSON |
/// | `exactly_ten_all` | same | all |
/// | `unique_fraction` | `n_unique / n_raw` | valid JSON with `n_raw > 0` |
/// | `year_compliance` | share of entries with year ≤ cutoff | at least one entry |
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormatReport {
    pub n_responses: usize,
    pub valid_json: Ratio,
    pub exactly_ten: Ratio,
    pub exactly_ten_all: Ratio,
    pub unique_fraction: Ratio,
    pub year_compliance: Ratio,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("format report needs at least one response")]
    Empty,
}

/// `lists` pairs each parsed response with its request's cutoff year.
pub fn format_report(lists: &[(&ParsedList, i32)], config: &BootstrapConfig) -> Result<FormatReport, FormatError> {
    if lists.is_empty() {
        return Err(FormatError::Empty);
    }
    let indicator = |b: bool| if b { 1.0 } else { 0.0 };
    let valid: Vec<f64> = lists.iter().map(|(l, _)| indicator(l.valid_json)).collect();
    let ten_valid: Vec<f64> = lists
        .iter()
        .filter(|(l, _)| l.valid_json)
        .map(|(l, _)| indicator(l.had_exactly_ten))
        .collect();
    let ten_all: Vec<f64> = lists.iter().map(|(l, _)| indicator(l.had_exactly_ten)).collect();
    let unique: Vec<f64> = lists
        .iter()
        .filter(|(l, _)| l.valid_json && l.n_raw > 0)
        .map(|(l, _)| l.n_unique as f64 / l.n_raw as f64)
        .collect();
    let years: Vec<f64> = lists
        .iter()
        .filter(|(l, _)| !l.entries.is_empty())
        .map(|(l, cutoff)| {
            l.entries.iter().filter(|e| e.year <= *cutoff).count() as f64 / l.entries.len() as f64
        })
        .collect();
    Ok(FormatReport {
        n_responses: lists.len(),
        valid_json: Ratio::from_values(&valid, config),
        exactly_ten: Ratio::from_values(&ten_valid, config),
        exactly_ten_all: Ratio::from_values(&ten_all, config),
        unique_fraction: Ratio::from_values(&unique, config),
        year_compliance: Ratio::from_values(&years, config),
    })
}
