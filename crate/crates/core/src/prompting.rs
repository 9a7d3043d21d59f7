//! System and user prompts for zero-shot, identity and few-shot prompting.
//!
//! A system prompt is assembled from up to three sections:
//!
//! ```text
//! [Persona]   identity only, placed before the task
//! Task        always present, carries the output constraints and cutoff year
//! [Examples]  few-shot only, placed after the task
//! ```
//!
//! Section wording lives in plain-text templates with `{name}` slots
//! (`{{` and `}}` produce literal braces). The built-in templates ship in
//! `assets/prompts/` and can be replaced by pointing [`Templates::from_dir`]
//! at a directory holding files of the same names.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Submission};
use crate::seed;

/// Allowed few-shot example counts.
pub const EXAMPLE_COUNTS: [usize; 3] = [1, 5, 10];

/// Number of recommendations every prompt asks for.
pub const LIST_LENGTH: usize = 10;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template `{template}`: unknown placeholder `{{{name}}}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}`: unbalanced brace at byte {offset}")]
    UnbalancedBrace { template: String, offset: usize },
    #[error("few-shot prompting needs {needed} examples but the pool holds {available}")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("no description configured for persona `{0}`")]
    MissingPersona(Persona),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    PersonaTable {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persona {
    RedditUser,
    MovieCritic,
    MovieRecommender,
}

impl Persona {
    pub const ALL: [Persona; 3] = [Persona::RedditUser, Persona::MovieCritic, Persona::MovieRecommender];

    pub fn as_str(self) -> &'static str {
        match self {
            Persona::RedditUser => "reddit_user",
            Persona::MovieCritic => "movie_critic",
            Persona::MovieRecommender => "movie_recommender",
        }
    }
}

impl fmt::Display for Persona {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Persona {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Persona::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| PromptError::InvalidStrategy(format!("unknown persona `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    ZeroShot,
    Identity(Persona),
    FewShot { n_examples: usize },
}

/// A prompting strategy plus the seed for its random choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "StrategyRecord", into = "StrategyRecord")]
pub struct Strategy {
    pub kind: StrategyKind,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StrategyRecord {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    persona: Option<Persona>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_examples: Option<usize>,
    #[serde(default)]
    seed: u64,
}

impl TryFrom<StrategyRecord> for Strategy {
    type Error = PromptError;

    fn try_from(r: StrategyRecord) -> Result<Self, Self::Error> {
        let kind = match (r.kind.as_str(), r.persona, r.n_examples) {
            ("zero_shot", None, None) => StrategyKind::ZeroShot,
            ("identity", Some(p), None) => StrategyKind::Identity(p),
            ("few_shot", None, Some(n)) => StrategyKind::FewShot { n_examples: n },
            (kind, persona, n) => {
                return Err(PromptError::InvalidStrategy(format!(
                    "kind `{kind}` with persona {persona:?} and n_examples {n:?}; \
                     a persona belongs to identity only and n_examples to few_shot only"
                )))
            }
        };
        Strategy::new(kind, r.seed)
    }
}

impl From<Strategy> for StrategyRecord {
    fn from(s: Strategy) -> Self {
        let (kind, persona, n_examples) = match s.kind {
            StrategyKind::ZeroShot => ("zero_shot", None, None),
            StrategyKind::Identity(p) => ("identity", Some(p), None),
            StrategyKind::FewShot { n_examples } => ("few_shot", None, Some(n_examples)),
        };
        StrategyRecord {
            kind: kind.into(),
            persona,
            n_examples,
            seed: s.seed,
        }
    }
}

impl Strategy {
    pub fn new(kind: StrategyKind, seed: u64) -> Result<Self, PromptError> {
        if let StrategyKind::FewShot { n_examples } = kind {
            if !EXAMPLE_COUNTS.contains(&n_examples) {
                return Err(PromptError::InvalidStrategy(format!(
                    "few_shot n_examples must be one of {EXAMPLE_COUNTS:?}, got {n_examples}"
                )));
            }
        }
        Ok(Self { kind, seed })
    }

    pub fn zero_shot() -> Self {
        Self {
            kind: StrategyKind::ZeroShot,
            seed: 0,
        }
    }

    pub fn identity(persona: Persona) -> Self {
        Self {
            kind: StrategyKind::Identity(persona),
            seed: 0,
        }
    }

    pub fn few_shot(n_examples: usize, seed: u64) -> Result<Self, PromptError> {
        Self::new(StrategyKind::FewShot { n_examples }, seed)
    }

    pub fn is_zero_shot(&self) -> bool {
        self.kind == StrategyKind::ZeroShot
    }

    /// Stable label used in run logs and reports, e.g. `identity:movie_critic`.
    pub fn id(&self) -> String {
        match self.kind {
            StrategyKind::ZeroShot => "zero_shot".into(),
            StrategyKind::Identity(p) => format!("identity:{p}"),
            StrategyKind::FewShot { n_examples } => format!("few_shot:{n_examples}"),
        }
    }

    /// Coarse family name: `zero_shot`, `identity` or `few_shot`.
    pub fn family(&self) -> &'static str {
        match self.kind {
            StrategyKind::ZeroShot => "zero_shot",
            StrategyKind::Identity(_) => "identity",
            StrategyKind::FewShot { .. } => "few_shot",
        }
    }

    /// Parses a label produced by [`Strategy::id`].
    pub fn parse_id(id: &str, seed: u64) -> Result<Self, PromptError> {
        let kind = match id.split_once(':') {
            None if id == "zero_shot" => StrategyKind::ZeroShot,
            Some(("identity", p)) => StrategyKind::Identity(p.parse()?),
            Some(("few_shot", n)) => StrategyKind::FewShot {
                n_examples: n
                    .parse()
                    .map_err(|_| PromptError::InvalidStrategy(format!("bad example count in `{id}`")))?,
            },
            _ => return Err(PromptError::InvalidStrategy(format!("unknown strategy `{id}`"))),
        };
        Self::new(kind, seed)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// Substitutes `{name}` slots. `{{` and `}}` escape literal braces; any
/// other brace or unknown name is an error.
pub fn render(template_name: &str, template: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let bytes = template.as_bytes();
    let mut i = 0;
    let mut literal_start = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push_str(&template[literal_start..i]);
                out.push('{');
                i += 2;
                literal_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push_str(&template[literal_start..i]);
                out.push('}');
                i += 2;
                literal_start = i;
            }
            b'{' => {
                out.push_str(&template[literal_start..i]);
                let close = template[i + 1..].find('}').ok_or(PromptError::UnbalancedBrace {
                    template: template_name.into(),
                    offset: i,
                })?;
                let name = &template[i + 1..i + 1 + close];
                let value = values
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| PromptError::UnknownPlaceholder {
                        template: template_name.into(),
                        name: name.into(),
                    })?;
                out.push_str(value);
                i += close + 2;
                literal_start = i;
            }
            b'}' => {
                return Err(PromptError::UnbalancedBrace {
                    template: template_name.into(),
                    offset: i,
                })
            }
            _ => i += 1,
        }
    }
    out.push_str(&template[literal_start..]);
    Ok(out)
}

/// Editable prompt wording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    /// Task section; slot `{year}`.
    pub task: String,
    /// Persona section; slot `{persona}`.
    pub persona: String,
    /// Examples section; slot `{examples}`.
    pub examples: String,
    /// One example pair; slots `{input}` and `{output}`.
    pub example: String,
    pub personas: BTreeMap<Persona, String>,
}

const TASK_FILE: &str = "task.txt";
const PERSONA_FILE: &str = "persona.txt";
const EXAMPLES_FILE: &str = "examples.txt";
const EXAMPLE_FILE: &str = "example.txt";
const PERSONAS_FILE: &str = "personas.json";

impl Default for Templates {
    fn default() -> Self {
        let personas = serde_json::from_str(include_str!("../assets/prompts/personas.json"))
            .expect("built-in persona table is valid");
        Self {
            task: include_str!("../assets/prompts/task.txt").trim_end().to_string(),
            persona: include_str!("../assets/prompts/persona.txt").trim_end().to_string(),
            examples: include_str!("../assets/prompts/examples.txt").trim_end().to_string(),
            example: include_str!("../assets/prompts/example.txt").trim_end().to_string(),
            personas,
        }
    }
}

impl Templates {
    /// Loads templates from `dir`, falling back to the built-in text for any
    /// file that is absent.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut t = Templates::default();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(None);
            }
            std::fs::read_to_string(&path)
                .map(|s| Some(s.trim_end().to_string()))
                .map_err(|source| PromptError::Io { path, source })
        };
        if let Some(s) = read(TASK_FILE)? {
            t.task = s;
        }
        if let Some(s) = read(PERSONA_FILE)? {
            t.persona = s;
        }
        if let Some(s) = read(EXAMPLES_FILE)? {
            t.examples = s;
        }
        if let Some(s) = read(EXAMPLE_FILE)? {
            t.example = s;
        }
        if let Some(s) = read(PERSONAS_FILE)? {
            let table: BTreeMap<Persona, String> = serde_json::from_str(&s).map_err(|source| PromptError::PersonaTable {
                path: dir.join(PERSONAS_FILE),
                source,
            })?;
            t.personas.extend(table);
        }
        t.validate()?;
        Ok(t)
    }

    /// Renders every template once with placeholder values.
    pub fn validate(&self) -> Result<(), PromptError> {
        render(TASK_FILE, &self.task, &[("year", "2000")])?;
        render(PERSONA_FILE, &self.persona, &[("persona", "p")])?;
        render(EXAMPLES_FILE, &self.examples, &[("examples", "e")])?;
        render(EXAMPLE_FILE, &self.example, &[("input", "i"), ("output", "o")])?;
        Ok(())
    }
}

/// An input/output pair shown to the model in few-shot prompting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub user_text: String,
    pub response_json: String,
}

/// The exact prompt pair sent for one (strategy, submission, repetition).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub strategy: Strategy,
    pub submission_id: String,
    pub repetition: u32,
    pub system_text: String,
    pub user_text: String,
    pub cutoff_year: i32,
}

impl PromptBundle {
    /// Content hash of the message pair.
    pub fn prompt_hash(&self) -> String {
        seed::content_hash(&[&self.system_text, &self.user_text])
    }
}

/// Entity-escapes `&`, `<` and `>` so tag delimiters stay unambiguous.
pub fn escape_tag_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_tag_text(text: &str) -> String {
    text.replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&")
}

/// `<title>…</title>\n<text>…</text>` with both parts escaped.
pub fn build_user_prompt(submission: &Submission) -> String {
    user_prompt_from_parts(&submission.title, &submission.body)
}

pub fn user_prompt_from_parts(title: &str, body: &str) -> String {
    format!(
        "<title>{}</title>\n<text>{}</text>",
        escape_tag_text(title),
        escape_tag_text(body)
    )
}

/// Inverse of [`build_user_prompt`]: recovers the original title and body.
pub fn parse_user_prompt(text: &str) -> Option<(String, String)> {
    let rest = text.strip_prefix("<title>")?;
    let (title, rest) = rest.split_once("</title>\n<text>")?;
    let body = rest.strip_suffix("</text>")?;
    if title.contains('<') || body.contains('<') {
        return None;
    }
    Some((unescape_tag_text(title), unescape_tag_text(body)))
}

/// Draws `k` distinct examples without replacement.
pub fn sample_examples(pool: &[FewShotExample], k: usize, seed: u64) -> Result<Vec<FewShotExample>, PromptError> {
    if pool.len() < k {
        return Err(PromptError::PoolTooSmall {
            needed: k,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// Builds few-shot examples from a corpus: each admitted submission with at
/// least ten gold items becomes one pair whose output lists its ten most
/// frequently suggested movies under their first catalog alias.
pub fn example_pool(corpus: &Corpus) -> Vec<FewShotExample> {
    corpus
        .submissions
        .iter()
        .filter_map(|s| {
            let titles: Vec<String> = corpus
                .ranked_gold(&s.id)
                .iter()
                .filter_map(|id| corpus.catalog.get(id.as_str()))
                .filter_map(|e| e.aliases.first().map(|a| format!("{a} ({})", e.release_year)))
                .take(LIST_LENGTH)
                .collect();
            (titles.len() == LIST_LENGTH).then(|| FewShotExample {
                user_text: build_user_prompt(s),
                response_json: serde_json::json!({ "recommendations": titles }).to_string(),
            })
        })
        .collect()
}

/// Renders prompts from a set of templates.
#[derive(Debug, Clone, Default)]
pub struct PromptBuilder {
    templates: Templates,
}

impl PromptBuilder {
    pub fn new(templates: Templates) -> Self {
        Self { templates }
    }

    pub fn templates(&self) -> &Templates {
        &self.templates
    }

    /// The task section alone; every strategy's system prompt contains it.
    pub fn task_section(&self, cutoff_year: i32) -> Result<String, PromptError> {
        render(TASK_FILE, &self.templates.task, &[("year", &cutoff_year.to_string())])
    }

    pub fn system_prompt(
        &self,
        strategy: &Strategy,
        cutoff_year: i32,
        example_pool: &[FewShotExample],
        sample_seed: u64,
    ) -> Result<String, PromptError> {
        let task = self.task_section(cutoff_year)?;
        match strategy.kind {
            StrategyKind::ZeroShot => Ok(task),
            StrategyKind::Identity(persona) => {
                let description = self
                    .templates
                    .personas
                    .get(&persona)
                    .ok_or(PromptError::MissingPersona(persona))?;
                let section = render(PERSONA_FILE, &self.templates.persona, &[("persona", description)])?;
                Ok(format!("{section}\n\n{task}"))
            }
            StrategyKind::FewShot { n_examples } => {
                let chosen = sample_examples(example_pool, n_examples, sample_seed)?;
                let pairs = chosen
                    .iter()
                    .map(|ex| {
                        render(
                            EXAMPLE_FILE,
                            &self.templates.example,
                            &[("input", &ex.user_text), ("output", &ex.response_json)],
                        )
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let section = render(EXAMPLES_FILE, &self.templates.examples, &[("examples", &pairs.join("\n\n"))])?;
                Ok(format!("{task}\n\n{section}"))
            }
        }
    }

    pub fn user_prompt(&self, submission: &Submission) -> String {
        build_user_prompt(submission)
    }

    /// Renders the bundle for one cell. Few-shot examples are drawn with a
    /// seed derived from the strategy seed, the submission and the
    /// repetition, so repetitions see different examples.
    pub fn bundle(
        &self,
        strategy: &Strategy,
        submission: &Submission,
        example_pool: &[FewShotExample],
        repetition: u32,
    ) -> Result<PromptBundle, PromptError> {
        let cutoff_year = submission.year();
        let sample_seed = seed::derive(
            strategy.seed,
            &["few_shot", &submission.id, &repetition.to_string()],
        );
        Ok(PromptBundle {
            strategy: *strategy,
            submission_id: submission.id.clone(),
            repetition,
            system_text: self.system_prompt(strategy, cutoff_year, example_pool, sample_seed)?,
            user_text: self.user_prompt(submission),
            cutoff_year,
        })
    }
}
