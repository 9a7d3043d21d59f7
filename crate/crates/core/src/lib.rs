//! Batch evaluation of chat-completion models as narrative-driven movie
//! recommenders.
//!
//! The pipeline runs in stages, each living in its own module:
//!
//! * [`corpus`]: annotated requests, community gold sets and the multilingual
//!   title catalog.
//! * [`prompting`]: zero-shot, identity and few-shot system prompts plus the
//!   tagged user prompt.
//! * [`runner`]: resumable, append-only execution of an experiment grid
//!   against chat-completion backends.
//! * [`parsing`]: JSON recovery, `Title (Year)` extraction and
//!   format-adherence measures.
//! * [`matching`]: exact and Ratcliff/Obershelp soft matching of titles
//!   against catalog aliases.
//! * [`evaluation`]: Precision/Recall/F1/NDCG@10, macro averages, inter-list
//!   diversity and release-year histograms.
//! * [`stats`]: percentile bootstrap, repeated-measures ANOVA and Bonferroni
//!   correction.
//! * [`robustness`]: construction of a post-cutoff dataset and the fixed-pool
//!   sensitivity loop.

pub mod corpus;
pub mod evaluation;
pub mod jsonl;
pub mod matching;
pub mod parsing;
pub mod prompting;
pub mod robustness;
pub mod runner;
pub mod seed;
pub mod stats;

pub use corpus::{Catalog, CatalogEntry, Corpus, GoldSet, MovieId, Submission};
pub use matching::{MatchMode, MatchOutcome, TitleIndex};
pub use parsing::{ParsedList, TitleYear};
pub use prompting::{PromptBuilder, PromptBundle, Strategy};

/// Version string stamped into run logs and report headers.
pub const TOOL_VERSION: &str = concat!("narrec ", env!("CARGO_PKG_VERSION"));
