//! The cross-examination protocol.
//!
//! An examination has three stages: the examiner receives the claim and asks
//! a first batch of questions; it is then repeatedly asked whether it has
//! follow-up questions, up to a cap on iterations; finally it is asked for a
//! correct/incorrect decision. The examinee answers each question one at a
//! time with the whole conversation so far as context.

pub mod fixture;
mod parse;
mod protocol;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::BackendError;
use crate::prompts::TemplateError;

pub use parse::{extract_questions, parse_decision, parse_yes_no};
pub use protocol::{majority_verdict, run_examination, run_majority, MajorityOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Reject,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Accept => "Accept",
            Verdict::Reject => "Reject",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExamConfig {
    pub max_followup_iterations: u32,
    pub max_questions_per_batch: usize,
    pub followups_enabled: bool,
    pub examiner_temperature: f64,
    pub examinee_temperature: f64,
    pub majority_runs: u32,
    /// Temperature for question generation in majority runs.
    pub majority_temperature: f64,
    pub seed: Option<u64>,
    pub max_tokens: u32,
}

impl Default for ExamConfig {
    fn default() -> Self {
        Self {
            max_followup_iterations: 5,
            max_questions_per_batch: 10,
            followups_enabled: true,
            examiner_temperature: 0.0,
            examinee_temperature: 0.0,
            majority_runs: 3,
            majority_temperature: 1.0,
            seed: None,
            max_tokens: crate::backend::DEFAULT_MAX_TOKENS,
        }
    }
}

impl ExamConfig {
    pub fn validate(&self) -> Result<(), ExamError> {
        if self.majority_runs == 0 || self.majority_runs.is_multiple_of(2) {
            return Err(ExamError::Config(format!(
                "majority_runs must be odd, got {}",
                self.majority_runs
            )));
        }
        if self.max_questions_per_batch == 0 {
            return Err(ExamError::Config("max_questions_per_batch must be positive".into()));
        }
        for (name, t) in [
            ("examiner_temperature", self.examiner_temperature),
            ("examinee_temperature", self.examinee_temperature),
            ("majority_temperature", self.majority_temperature),
        ] {
            if t.is_nan() || t < 0.0 {
                return Err(ExamError::Config(format!("{name} must be >= 0, got {t}")));
            }
        }
        if self.max_tokens == 0 {
            return Err(ExamError::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Examiner,
    Examinee,
    System,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TurnKind {
    Setup,
    QuestionBatch,
    Question,
    Answer,
    FollowupProbe,
    FollowupReply,
    /// The prompt asking for the follow-up questions themselves.
    FollowupRequest,
    Decision,
    Note,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub speaker: Speaker,
    pub kind: TurnKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDecision {
    pub verdict: Verdict,
    pub inconclusive: bool,
    pub source_text: String,
}

impl RawDecision {
    pub fn inconclusive(source_text: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::Reject,
            inconclusive: true,
            source_text: source_text.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub questions_total: usize,
    pub followup_iterations: u32,
    /// Questions per batch; index 0 is the setup batch.
    pub questions_per_iteration: Vec<usize>,
}

impl Counters {
    /// Recomputes the counters from a turn list.
    pub fn from_turns(turns: &[Turn]) -> Self {
        let mut c = Counters::default();
        for t in turns {
            match (t.speaker, t.kind) {
                (Speaker::Examiner, TurnKind::QuestionBatch) => c.questions_per_iteration.push(0),
                (Speaker::Examiner, TurnKind::Question) => {
                    if let Some(last) = c.questions_per_iteration.last_mut() {
                        *last += 1;
                    }
                    c.questions_total += 1;
                }
                (Speaker::Examiner, TurnKind::FollowupReply) if parse_yes_no(&t.text) => {
                    c.followup_iterations += 1
                }
                _ => {}
            }
        }
        c
    }

    /// Sizes of the follow-up batches only.
    pub fn followup_batches(&self) -> &[usize] {
        self.questions_per_iteration.get(1..).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub claim: String,
    pub turns: Vec<Turn>,
    pub decision: RawDecision,
    pub counters: Counters,
    pub cap_hit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_seed: Option<u64>,
    /// Set when a backend failure cut the examination short.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

impl Transcript {
    pub fn verdict(&self) -> Verdict {
        self.decision.verdict
    }

    pub fn counters_consistent(&self) -> bool {
        let c = Counters::from_turns(&self.turns);
        c == self.counters && c.questions_total == c.questions_per_iteration.iter().sum::<usize>()
    }

    pub fn turns_of(&self, kind: TurnKind) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(move |t| t.kind == kind)
    }

    /// Two-speaker rendering: the claim, each question batch, the answers to
    /// it, and the final decision. Prompts are omitted.
    pub fn render_dialogue(&self) -> String {
        let mut blocks: Vec<String> = vec![format!("Examinee: {}", self.claim)];
        let mut answers: Vec<&str> = Vec::new();
        let flush = |answers: &mut Vec<&str>, blocks: &mut Vec<String>| {
            match answers.len() {
                0 => {}
                1 => blocks.push(format!("Examinee: {}", answers[0])),
                _ => {
                    let body: Vec<String> = answers
                        .iter()
                        .enumerate()
                        .map(|(i, a)| format!("{}. {}", i + 1, a))
                        .collect();
                    blocks.push(format!("Examinee:\n{}", body.join("\n")));
                }
            }
            answers.clear();
        };
        for t in &self.turns {
            match (t.speaker, t.kind) {
                (Speaker::Examiner, TurnKind::QuestionBatch) => {
                    flush(&mut answers, &mut blocks);
                    if t.text.contains('\n') {
                        blocks.push(format!("Examiner:\n{}", t.text.trim()));
                    } else {
                        blocks.push(format!("Examiner: {}", t.text.trim()));
                    }
                }
                (Speaker::Examinee, TurnKind::Answer) => answers.push(t.text.trim()),
                (Speaker::Examiner, TurnKind::Decision) => {
                    flush(&mut answers, &mut blocks);
                    blocks.push(format!("Examiner: {}", t.text.trim()));
                }
                _ => {}
            }
        }
        flush(&mut answers, &mut blocks);
        if let Some(reason) = &self.aborted {
            blocks.push(format!("[aborted: {reason}]"));
        }
        blocks.join("\n\n")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExamError {
    #[error("examination aborted: {source}")]
    Aborted {
        transcript: Box<Transcript>,
        #[source]
        source: BackendError,
    },
    #[error("claim is empty")]
    EmptyClaim,
    #[error("invalid exam config: {0}")]
    Config(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}
