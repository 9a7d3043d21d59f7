//! Resolution of recommended `Title (Year)` strings to catalog ids.
//!
//! Exact mode requires a normalized alias to equal the normalized title and
//! the release year to agree. Soft mode replaces title equality with a
//! Ratcliff/Obershelp similarity of at least the threshold. Both modes
//! break ties by the smallest movie id.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CatalogEntry, MovieId};
use crate::parsing::{ParsedList, TitleYear};

pub const DEFAULT_SOFT_THRESHOLD: f64 = 0.9;

/// Case-folds, trims and collapses internal whitespace runs.
pub fn normalize_title(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Longest common block of `a[a_lo..a_hi]` and `b[b_lo..b_hi]`. Among
/// blocks of maximal length the one starting earliest in `a`, then in `b`,
/// wins. Returns `(start_a, start_b, len)`.
fn longest_block(a: &[char], b: &[char], a_lo: usize, a_hi: usize, b_lo: usize, b_hi: usize) -> (usize, usize, usize) {
    let width = b_hi - b_lo;
    let mut prev = vec![0usize; width + 1];
    let mut cur = vec![0usize; width + 1];
    let mut best = (a_lo, b_lo, 0usize);
    for i in a_lo..a_hi {
        for j in b_lo..b_hi {
            let col = j - b_lo + 1;
            cur[col] = if a[i] == b[j] { prev[col - 1] + 1 } else { 0 };
            let len = cur[col];
            if len > 0 {
                let start = (i + 1 - len, j + 1 - len);
                if len > best.2 || (len == best.2 && start < (best.0, best.1)) {
                    best = (start.0, start.1, len);
                }
            }
        }
        std::mem::swap(&mut prev, &mut cur);
        cur.iter_mut().for_each(|c| *c = 0);
    }
    best
}

/// Total length of the matching blocks found by recursive longest common
/// substring decomposition.
pub fn matching_characters(a: &[char], b: &[char]) -> usize {
    let mut total = 0;
    let mut stack = vec![(0, a.len(), 0, b.len())];
    while let Some((a_lo, a_hi, b_lo, b_hi)) = stack.pop() {
        if a_lo >= a_hi || b_lo >= b_hi {
            continue;
        }
        let (i, j, len) = longest_block(a, b, a_lo, a_hi, b_lo, b_hi);
        if len == 0 {
            continue;
        }
        total += len;
        stack.push((a_lo, i, b_lo, j));
        stack.push((i + len, a_hi, j + len, b_hi));
    }
    total
}

/// Ratcliff/Obershelp similarity `2M / (|a| + |b|)` over characters; two
/// empty strings are identical.
pub fn gestalt_similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * matching_characters(&a, &b) as f64 / (a.len() + b.len()) as f64
}

/// What soft matching compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftScope {
    /// Normalized titles only; years must agree exactly.
    #[default]
    Title,
    /// Normalized `title (year)` strings; years enter only through the
    /// similarity.
    TitleYear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatchMode {
    Exact,
    Soft {
        threshold: f64,
        #[serde(default)]
        scope: SoftScope,
    },
}

#[derive(Debug, Error, PartialEq)]
#[error("soft-match threshold {0} must lie in (0, 1]")]
pub struct InvalidThreshold(pub f64);

impl MatchMode {
    pub fn soft(threshold: f64) -> Result<Self, InvalidThreshold> {
        Self::soft_with_scope(threshold, SoftScope::Title)
    }

    pub fn soft_with_scope(threshold: f64, scope: SoftScope) -> Result<Self, InvalidThreshold> {
        if threshold > 0.0 && threshold <= 1.0 {
            Ok(MatchMode::Soft { threshold, scope })
        } else {
            Err(InvalidThreshold(threshold))
        }
    }

    pub fn label(&self) -> String {
        match self {
            MatchMode::Exact => "exact".into(),
            MatchMode::Soft {
                threshold,
                scope: SoftScope::Title,
            } => format!("soft@{threshold}"),
            MatchMode::Soft {
                threshold,
                scope: SoftScope::TitleYear,
            } => format!("soft-title-year@{threshold}"),
        }
    }
}

impl Default for MatchMode {
    fn default() -> Self {
        MatchMode::Exact
    }
}

/// A resolved entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub movie_id: MovieId,
    pub similarity: f64,
}

/// Per-entry resolution aligned with a parsed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub ids: Vec<Option<MovieId>>,
    pub similarities: Vec<Option<f64>>,
    pub mode: MatchMode,
}

impl MatchOutcome {
    pub fn empty(mode: MatchMode) -> Self {
        Self {
            ids: Vec::new(),
            similarities: Vec::new(),
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Matched ids in list order.
    pub fn matched(&self) -> impl Iterator<Item = &MovieId> {
        self.ids.iter().flatten()
    }
}

struct Candidate {
    movie_id: MovieId,
    year: i32,
    aliases: Vec<String>,
}

/// Normalized aliases of a set of catalog entries, indexed for matching.
pub struct TitleIndex {
    candidates: Vec<Candidate>,
    exact: HashMap<(String, i32), usize>,
    by_year: HashMap<i32, Vec<usize>>,
}

impl TitleIndex {
    pub fn new<'a>(entries: impl IntoIterator<Item = &'a CatalogEntry>) -> Self {
        let mut candidates: Vec<Candidate> = entries
            .into_iter()
            .map(|e| {
                let mut aliases: Vec<String> = e.aliases.iter().map(|a| normalize_title(a)).collect();
                aliases.sort();
                aliases.dedup();
                Candidate {
                    movie_id: e.movie_id.clone(),
                    year: e.release_year,
                    aliases,
                }
            })
            .collect();
        candidates.sort_by(|a, b| a.movie_id.cmp(&b.movie_id));
        candidates.dedup_by(|a, b| a.movie_id == b.movie_id);
        let mut exact = HashMap::new();
        let mut by_year: HashMap<i32, Vec<usize>> = HashMap::new();
        for (idx, c) in candidates.iter().enumerate() {
            by_year.entry(c.year).or_default().push(idx);
            for alias in &c.aliases {
                // Candidates are in id order, so the first insert is the smallest id.
                exact.entry((alias.clone(), c.year)).or_insert(idx);
            }
        }
        Self {
            candidates,
            exact,
            by_year,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn contains(&self, id: &MovieId) -> bool {
        self.candidates
            .binary_search_by(|c| c.movie_id.cmp(id))
            .is_ok()
    }

    /// Resolves one entry, or `None` when nothing qualifies.
    pub fn match_entry(&self, entry: &TitleYear, mode: MatchMode) -> Option<Match> {
        let title = normalize_title(&entry.title);
        match mode {
            MatchMode::Exact => self.exact.get(&(title, entry.year)).map(|&i| Match {
                movie_id: self.candidates[i].movie_id.clone(),
                similarity: 1.0,
            }),
            MatchMode::Soft {
                threshold,
                scope: SoftScope::Title,
            } => {
                let pool = self.by_year.get(&entry.year)?;
                self.best(pool.iter().copied(), threshold, |c| {
                    c.aliases.iter().map(|a| gestalt_similarity(&title, a)).fold(0.0, f64::max)
                })
            }
            MatchMode::Soft {
                threshold,
                scope: SoftScope::TitleYear,
            } => {
                let probe = format!("{title} ({})", entry.year);
                self.best(0..self.candidates.len(), threshold, |c| {
                    c.aliases
                        .iter()
                        .map(|a| gestalt_similarity(&probe, &format!("{a} ({})", c.year)))
                        .fold(0.0, f64::max)
                })
            }
        }
    }

    fn best(
        &self,
        pool: impl Iterator<Item = usize>,
        threshold: f64,
        score: impl Fn(&Candidate) -> f64,
    ) -> Option<Match> {
        let mut best: Option<(f64, usize)> = None;
        for idx in pool {
            let s = score(&self.candidates[idx]);
            if s < threshold {
                continue;
            }
            // Indices ascend with movie id, so strict improvement keeps the smallest id on ties.
            let better = match best {
                None => true,
                Some((bs, bi)) => s > bs || (s == bs && idx < bi),
            };
            if better {
                best = Some((s, idx));
            }
        }
        best.map(|(similarity, i)| Match {
            movie_id: self.candidates[i].movie_id.clone(),
            similarity,
        })
    }

    /// Resolves every entry; an id already matched by an earlier entry
    /// counts only once.
    pub fn match_list(&self, parsed: &ParsedList, mode: MatchMode) -> MatchOutcome {
        let mut seen: HashSet<MovieId> = HashSet::new();
        let mut ids = Vec::with_capacity(parsed.entries.len());
        let mut similarities = Vec::with_capacity(parsed.entries.len());
        for entry in &parsed.entries {
            match self.match_entry(entry, mode) {
                Some(m) if seen.insert(m.movie_id.clone()) => {
                    ids.push(Some(m.movie_id));
                    similarities.push(Some(m.similarity));
                }
                _ => {
                    ids.push(None);
                    similarities.push(None);
                }
            }
        }
        MatchOutcome {
            ids,
            similarities,
            mode,
        }
    }
}
