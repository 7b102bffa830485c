//! QA datasets, claim generation and falsehood generation.
//!
//! Every dataset is stored in one unified JSON Lines schema ([`QAItem`]);
//! converting the original distributions to it happens outside this crate.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, Capability, ChatMessage, CompletionRequest};
use crate::labeling::mentions_answer;
use crate::prompts::{PromptCatalog, PromptKey, TemplateError};

/// Share of malformed lines above which a dataset file is refused.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;
pub const FALSEHOOD_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryFormat {
    Question,
    FillBlank,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub dataset: String,
    pub query: String,
    pub query_format: QueryFormat,
    pub gold_answer: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

impl QAItem {
    fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.query.trim().is_empty() {
            return Err("empty query".into());
        }
        if self.gold_answer.trim().is_empty() {
            return Err("empty gold_answer".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClaimMode {
    Truthful,
    Falsehood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedClaim {
    pub item_id: String,
    pub text: String,
    pub generator_backend: String,
    pub mode: ClaimMode,
    pub prompt_used: String,
    /// Token logprobs of the generated answer, when the backend offers them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub items: Vec<QAItem>,
    pub rejects: Vec<RejectedLine>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("{malformed} of {total} lines malformed (limit {:.0}%)", MAX_MALFORMED_FRACTION * 100.0)]
    TooManyMalformed { malformed: usize, total: usize },
    #[error("cannot sample {requested} items from {available}")]
    SampleTooLarge { requested: usize, available: usize },
}

/// Loads a JSON Lines dataset. Malformed lines are reported in
/// [`LoadedDataset::rejects`]; more than 10% of them fails the load.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    let mut rejects = Vec::new();
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let parsed = serde_json::from_str::<QAItem>(&line)
            .map_err(|e| e.to_string())
            .and_then(|item| item.check().map(|_| item));
        match parsed {
            Ok(item) => {
                if !seen.insert(item.id.clone()) {
                    return Err(DatasetError::DuplicateId(item.id));
                }
                items.push(item);
            }
            Err(reason) => rejects.push(RejectedLine { line: i + 1, reason }),
        }
    }
    if total > 0 && rejects.len() as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(DatasetError::TooManyMalformed {
            malformed: rejects.len(),
            total,
        });
    }
    Ok(LoadedDataset { items, rejects })
}

/// Seeded uniform sample without replacement, returned in dataset order.
pub fn sample_subset(items: &[QAItem], n: usize, seed: u64) -> Result<Vec<QAItem>, DatasetError> {
    if n > items.len() {
        return Err(DatasetError::SampleTooLarge {
            requested: n,
            available: items.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, items.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| items[i].clone()).collect())
}

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("backend returned an empty completion for item `{0}`")]
    EmptyCompletion(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationOptions {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: crate::backend::DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }
}

fn blank_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"_{2,}").unwrap())
}

/// Text sent to the model for a fill-in-the-blank query: the prefix before a
/// trailing blank, or the whole query when the blank sits mid-sentence.
pub fn completion_prompt(query: &str) -> &str {
    match blank_re().find(query) {
        Some(m) if query[m.end()..].trim().is_empty() && !query[..m.start()].trim().is_empty() => {
            query[..m.start()].trim_end()
        }
        _ => query,
    }
}

/// Replaces the first blank with `answer`, or appends it when the query has
/// no blank.
pub fn fill_blank(query: &str, answer: &str) -> String {
    match blank_re().find(query) {
        Some(m) => format!("{}{}{}", &query[..m.start()], answer, &query[m.end()..]),
        None => format!("{} {}", query.trim_end(), answer),
    }
}

fn first_line(text: &str) -> &str {
    text.trim().lines().next().unwrap_or("").trim()
}

fn ask(
    backend: &dyn Backend,
    prompt: &str,
    opts: &GenerationOptions,
    seed: Option<u64>,
) -> Result<crate::backend::CompletionResponse, BackendError> {
    let req = CompletionRequest::new(vec![ChatMessage::user(prompt)])
        .temperature(opts.temperature)
        .max_tokens(opts.max_tokens)
        .seed(seed)
        .with_logprobs(backend.descriptor().supports(Capability::Logprobs));
    backend.complete(&req)
}

/// Prompt used to elicit a claim for a question-format item.
pub fn claim_prompt(item: &QAItem, catalog: &PromptCatalog, backend: &dyn Backend) -> Result<String, TemplateError> {
    let style = backend.descriptor().style;
    match item.query_format {
        QueryFormat::Question => Ok(format!(
            "{} {}",
            catalog
                .get(PromptKey::ClaimFromQuestion, style)?
                .render([("question", item.query.as_str())])?,
            catalog.text(PromptKey::ClaimPhraseSuffix, style)?
        )),
        QueryFormat::FillBlank => Ok(completion_prompt(&item.query).to_string()),
    }
}

/// Turns a dataset item into the examinee's claim.
pub fn generate_claim(
    item: &QAItem,
    backend: &dyn Backend,
    catalog: &PromptCatalog,
    opts: &GenerationOptions,
) -> Result<GeneratedClaim, GenerationError> {
    let prompt = claim_prompt(item, catalog, backend)?;
    let response = ask(backend, &prompt, opts, opts.seed)?;
    let text = match item.query_format {
        QueryFormat::Question => response.text.trim().to_string(),
        QueryFormat::FillBlank => {
            let answer = first_line(&response.text);
            if answer.is_empty() {
                String::new()
            } else {
                fill_blank(&item.query, answer)
            }
        }
    };
    if text.is_empty() {
        return Err(GenerationError::EmptyCompletion(item.id.clone()));
    }
    Ok(GeneratedClaim {
        item_id: item.id.clone(),
        text,
        generator_backend: backend.descriptor().id.clone(),
        mode: ClaimMode::Truthful,
        prompt_used: prompt,
        token_logprobs: response.logprob_values(),
    })
}

/// True iff neither the gold answer nor any alias occurs in the claim.
pub fn verify_falsehood(claim_text: &str, item: &QAItem) -> bool {
    !mentions_answer(claim_text, item)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FalsehoodOutcome {
    Kept { claim: GeneratedClaim, attempts: u32 },
    Discarded { attempts: u32, last_text: String },
}

impl FalsehoodOutcome {
    pub fn is_kept(&self) -> bool {
        matches!(self, FalsehoodOutcome::Kept { .. })
    }
}

/// Asks for a deliberately wrong answer, up to [`FALSEHOOD_ATTEMPTS`] times,
/// keeping the first one that passes [`verify_falsehood`].
pub fn generate_falsehood(
    item: &QAItem,
    backend: &dyn Backend,
    catalog: &PromptCatalog,
    opts: &GenerationOptions,
) -> Result<FalsehoodOutcome, GenerationError> {
    let style = backend.descriptor().style;
    let prompt = match item.query_format {
        QueryFormat::Question => format!(
            "{} {}",
            catalog
                .get(PromptKey::FalsehoodQuestion, style)?
                .render([("question", item.query.as_str())])?,
            catalog.text(PromptKey::FalsehoodPhraseSuffix, style)?
        ),
        QueryFormat::FillBlank => catalog
            .get(PromptKey::FalsehoodCompletion, style)?
            .render([("query", item.query.as_str())])?,
    };
    let mut last_text = String::new();
    for attempt in 1..=FALSEHOOD_ATTEMPTS {
        let seed = opts.seed.map(|s| s.wrapping_add(u64::from(attempt - 1)));
        let response = ask(backend, &prompt, opts, seed)?;
        let text = match item.query_format {
            QueryFormat::Question => response.text.trim().to_string(),
            QueryFormat::FillBlank => {
                let answer = first_line(&response.text);
                if answer.is_empty() {
                    String::new()
                } else {
                    fill_blank(&item.query, answer)
                }
            }
        };
        if !text.is_empty() && verify_falsehood(&text, item) {
            return Ok(FalsehoodOutcome::Kept {
                claim: GeneratedClaim {
                    item_id: item.id.clone(),
                    text,
                    generator_backend: backend.descriptor().id.clone(),
                    mode: ClaimMode::Falsehood,
                    prompt_used: prompt,
                    token_logprobs: response.logprob_values(),
                },
                attempts: attempt,
            });
        }
        last_text = text;
    }
    Ok(FalsehoodOutcome::Discarded {
        attempts: FALSEHOOD_ATTEMPTS,
        last_text,
    })
}
