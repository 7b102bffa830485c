//! Scripted examinations with known outcomes.
//!
//! A fixture holds the examiner and examinee replies of one complete
//! examination as two sequence scripts, plus the outcome the protocol must
//! reach when replaying them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendDescriptor, BackendError, Script, ScriptReply, ScriptedBackend, Style};
use crate::prompts::PromptCatalog;

use super::{run_examination, ExamConfig, ExamError, Transcript, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedOutcome {
    pub verdict: Verdict,
    pub inconclusive: bool,
    pub questions_total: usize,
    pub followup_iterations: u32,
    pub questions_per_iteration: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptFixture {
    #[serde(default)]
    pub examiner_style: Style,
    pub claim: String,
    pub examiner: Vec<ScriptReply>,
    pub examinee: Vec<ScriptReply>,
    pub expected: ExpectedOutcome,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("fixture {path}: {source}")]
    Load {
        path: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Exam(#[from] ExamError),
}

pub struct FixtureRun {
    pub transcript: Transcript,
    pub examiner_unused: usize,
    pub examinee_unused: usize,
}

impl TranscriptFixture {
    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let load = || -> Result<Self, BackendError> {
            Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
        };
        load().map_err(|source| FixtureError::Load {
            path: path.display().to_string(),
            source,
        })
    }

    /// Replays the fixture through [`run_examination`].
    pub fn run(&self, catalog: &PromptCatalog, config: &ExamConfig) -> Result<FixtureRun, FixtureError> {
        let examiner = ScriptedBackend::new(
            BackendDescriptor::new("fixture-examiner", self.examiner_style),
            Script::Sequence(self.examiner.clone()),
        )?;
        let examinee = ScriptedBackend::new(
            BackendDescriptor::new("fixture-examinee", self.examiner_style),
            Script::Sequence(self.examinee.clone()),
        )?;
        let transcript = run_examination(&self.claim, &examiner, &examinee, catalog, config)?;
        Ok(FixtureRun {
            transcript,
            examiner_unused: examiner.remaining().unwrap_or(0),
            examinee_unused: examinee.remaining().unwrap_or(0),
        })
    }

    /// Differences between a replay and the expected outcome.
    pub fn mismatches(&self, run: &FixtureRun) -> Vec<String> {
        let t = &run.transcript;
        let e = &self.expected;
        let mut out = Vec::new();
        if t.verdict() != e.verdict {
            out.push(format!("verdict {} != {}", t.verdict(), e.verdict));
        }
        if t.decision.inconclusive != e.inconclusive {
            out.push(format!("inconclusive {} != {}", t.decision.inconclusive, e.inconclusive));
        }
        if t.counters.questions_total != e.questions_total {
            out.push(format!("questions_total {} != {}", t.counters.questions_total, e.questions_total));
        }
        if t.counters.followup_iterations != e.followup_iterations {
            out.push(format!(
                "followup_iterations {} != {}",
                t.counters.followup_iterations, e.followup_iterations
            ));
        }
        if t.counters.questions_per_iteration != e.questions_per_iteration {
            out.push(format!(
                "questions_per_iteration {:?} != {:?}",
                t.counters.questions_per_iteration, e.questions_per_iteration
            ));
        }
        if run.examiner_unused + run.examinee_unused > 0 {
            out.push(format!(
                "unused script replies: examiner {}, examinee {}",
                run.examiner_unused, run.examinee_unused
            ));
        }
        out
    }
}
