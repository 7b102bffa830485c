use crate::backend::{Backend, BackendError, ChatMessage, CompletionRequest};
use crate::prompts::{PromptCatalog, PromptKey};

use super::{
    extract_questions, parse_decision, parse_yes_no, Counters, ExamConfig, ExamError,
    RawDecision, Speaker, Transcript, Turn, TurnKind, Verdict,
};

/// Stand-in context text for an empty model reply; chat messages may not be blank.
const EMPTY_REPLY: &str = "(empty reply)";

#[derive(Debug, Clone, Copy)]
struct RunParams {
    question_temperature: f64,
    seed: Option<u64>,
}

struct Prompts {
    setup: Vec<ChatMessage>,
    followup_ask: String,
    followup_get: String,
    decision: String,
    examinee_answer: String,
}

struct Session<'a> {
    examiner: &'a dyn Backend,
    examinee: &'a dyn Backend,
    config: &'a ExamConfig,
    params: RunParams,
    prompts: Prompts,
    turns: Vec<Turn>,
    examiner_msgs: Vec<ChatMessage>,
    examinee_msgs: Vec<ChatMessage>,
    questions_per_iteration: Vec<usize>,
    followup_iterations: u32,
    cap_hit: bool,
}

impl<'a> Session<'a> {
    fn push(&mut self, speaker: Speaker, kind: TurnKind, text: impl Into<String>) {
        let index = self.turns.len();
        self.turns.push(Turn {
            index,
            speaker,
            kind,
            text: text.into(),
        });
    }

    fn request(&self, messages: Vec<ChatMessage>, temperature: f64) -> CompletionRequest {
        CompletionRequest::new(messages)
            .temperature(temperature)
            .max_tokens(self.config.max_tokens)
            .seed(self.params.seed)
    }

    fn call_examiner(&mut self, temperature: f64) -> Result<String, BackendError> {
        let req = self.request(self.examiner_msgs.clone(), temperature);
        let text = self.examiner.complete(&req)?.text;
        self.examiner_msgs.push(ChatMessage::assistant(context_text(&text)));
        Ok(text)
    }

    fn ask_examiner(&mut self, prompt: String, temperature: f64) -> Result<String, BackendError> {
        self.examiner_msgs.push(ChatMessage::user(prompt));
        self.call_examiner(temperature)
    }

    fn record_batch(&mut self, text: &str) -> Vec<String> {
        self.push(Speaker::Examiner, TurnKind::QuestionBatch, text);
        self.questions_per_iteration.push(0);
        extract_questions(text, self.config.max_questions_per_batch)
    }

    /// Feeds questions to the examinee one at a time; returns the answers as
    /// one context block for the examiner.
    fn answer_all(&mut self, questions: &[String]) -> Result<String, BackendError> {
        let mut answers = Vec::with_capacity(questions.len());
        for q in questions {
            self.push(Speaker::Examiner, TurnKind::Question, q.clone());
            if let Some(n) = self.questions_per_iteration.last_mut() {
                *n += 1;
            }
            self.examinee_msgs.push(ChatMessage::user(format!(
                "{}\n{}",
                self.prompts.examinee_answer, q
            )));
            let req = self.request(self.examinee_msgs.clone(), self.config.examinee_temperature);
            let text = self.examinee.complete(&req)?.text;
            self.push(Speaker::Examinee, TurnKind::Answer, text.clone());
            self.examinee_msgs.push(ChatMessage::assistant(context_text(&text)));
            answers.push(text);
        }
        Ok(answer_block(&answers))
    }

    fn drive(&mut self) -> Result<RawDecision, BackendError> {
        let setup = std::mem::take(&mut self.prompts.setup);
        let setup_text: Vec<&str> = setup.iter().map(|m| m.content.as_str()).collect();
        self.push(Speaker::System, TurnKind::Setup, setup_text.join("\n"));
        self.examiner_msgs.extend(setup);

        let batch = self.call_examiner(self.params.question_temperature)?;
        let questions = self.record_batch(&batch);
        if questions.is_empty() {
            self.push(
                Speaker::System,
                TurnKind::Note,
                "examiner asked no questions; proceeding to decision",
            );
            return self.decide(None);
        }
        let mut pending = Some(self.answer_all(&questions)?);

        if self.config.followups_enabled {
            loop {
                if self.followup_iterations >= self.config.max_followup_iterations {
                    self.cap_hit = true;
                    break;
                }
                let probe = self.prompts.followup_ask.clone();
                self.push(Speaker::System, TurnKind::FollowupProbe, probe.clone());
                let reply =
                    self.ask_examiner(with_answers(pending.take(), &probe), self.config.examiner_temperature)?;
                self.push(Speaker::Examiner, TurnKind::FollowupReply, reply.clone());
                if !parse_yes_no(&reply) {
                    break;
                }

                let get = self.prompts.followup_get.clone();
                self.push(Speaker::System, TurnKind::FollowupRequest, get.clone());
                let batch = self.ask_examiner(get, self.params.question_temperature)?;
                self.followup_iterations += 1;
                let questions = self.record_batch(&batch);
                if questions.is_empty() {
                    self.push(Speaker::System, TurnKind::Note, "follow-up batch contained no questions");
                } else {
                    pending = Some(self.answer_all(&questions)?);
                }
            }
        }
        self.decide(pending)
    }

    fn decide(&mut self, pending: Option<String>) -> Result<RawDecision, BackendError> {
        let prompt = self.prompts.decision.clone();
        self.push(Speaker::System, TurnKind::Decision, prompt.clone());
        let reply = self.ask_examiner(with_answers(pending, &prompt), self.config.examiner_temperature)?;
        self.push(Speaker::Examiner, TurnKind::Decision, reply.clone());
        Ok(parse_decision(&reply))
    }

    fn finish(self, claim: &str, decision: RawDecision, aborted: Option<String>) -> Transcript {
        let questions_total = self.questions_per_iteration.iter().sum();
        Transcript {
            claim: claim.to_string(),
            turns: self.turns,
            decision,
            counters: Counters {
                questions_total,
                followup_iterations: self.followup_iterations,
                questions_per_iteration: self.questions_per_iteration,
            },
            cap_hit: self.cap_hit,
            run_seed: self.params.seed,
            aborted,
        }
    }
}

fn context_text(text: &str) -> &str {
    if text.trim().is_empty() {
        EMPTY_REPLY
    } else {
        text
    }
}

fn answer_block(answers: &[String]) -> String {
    match answers {
        [single] => context_text(single).to_string(),
        _ => answers
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{}. {}", i + 1, context_text(a)))
            .collect::<Vec<_>>()
            .join("\n"),
    }
}

fn with_answers(answers: Option<String>, prompt: &str) -> String {
    match answers {
        Some(a) => format!("{a}\n\n{prompt}"),
        None => prompt.to_string(),
    }
}

fn examine(
    claim: &str,
    examiner: &dyn Backend,
    examinee: &dyn Backend,
    catalog: &PromptCatalog,
    config: &ExamConfig,
    params: RunParams,
) -> Result<Transcript, ExamError> {
    let claim = claim.trim();
    if claim.is_empty() {
        return Err(ExamError::EmptyClaim);
    }
    let style = examiner.descriptor().style;
    let prompts = Prompts {
        setup: catalog.setup_messages(style, claim)?,
        followup_ask: catalog.text(PromptKey::FollowupAsk, style)?,
        followup_get: catalog.text(PromptKey::FollowupGet, style)?,
        decision: catalog.text(PromptKey::Decision, style)?,
        examinee_answer: catalog.text(PromptKey::ExamineeAnswer, examinee.descriptor().style)?,
    };
    let mut session = Session {
        examiner,
        examinee,
        config,
        params,
        prompts,
        turns: Vec::new(),
        examiner_msgs: Vec::new(),
        examinee_msgs: vec![ChatMessage::assistant(claim)],
        questions_per_iteration: Vec::new(),
        followup_iterations: 0,
        cap_hit: false,
    };
    match session.drive() {
        Ok(decision) => Ok(session.finish(claim, decision, None)),
        Err(source) => {
            let transcript = session.finish(
                claim,
                RawDecision::inconclusive(""),
                Some(source.to_string()),
            );
            Err(ExamError::Aborted {
                transcript: Box::new(transcript),
                source,
            })
        }
    }
}

/// Runs one examination of `claim`.
///
/// Backend failures return [`ExamError::Aborted`] carrying the partial
/// transcript; nothing is ever truncated to fit a context window.
pub fn run_examination(
    claim: &str,
    examiner: &dyn Backend,
    examinee: &dyn Backend,
    catalog: &PromptCatalog,
    config: &ExamConfig,
) -> Result<Transcript, ExamError> {
    config.validate()?;
    examine(
        claim,
        examiner,
        examinee,
        catalog,
        config,
        RunParams {
            question_temperature: config.examiner_temperature,
            seed: config.seed,
        },
    )
}

/// Reject iff at least half the votes (rounded up) reject.
pub fn majority_verdict(votes: &[Verdict]) -> Verdict {
    let rejects = votes.iter().filter(|v| **v == Verdict::Reject).count();
    if rejects >= votes.len().div_ceil(2) {
        Verdict::Reject
    } else {
        Verdict::Accept
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MajorityOutcome {
    pub verdict: Verdict,
    pub transcripts: Vec<Transcript>,
}

/// Runs `majority_runs` examinations with sampled question generation and
/// distinct seeds (`seed + i`), then takes the majority vote.
///
/// Runs execute in order, so a sequence-scripted backend serves them one
/// after another. An aborted run votes Reject and keeps its partial
/// transcript with the `aborted` flag set.
pub fn run_majority(
    claim: &str,
    examiner: &dyn Backend,
    examinee: &dyn Backend,
    catalog: &PromptCatalog,
    config: &ExamConfig,
) -> Result<MajorityOutcome, ExamError> {
    config.validate()?;
    let base = config.seed.unwrap_or(0);
    let mut transcripts = Vec::with_capacity(config.majority_runs as usize);
    for i in 0..config.majority_runs {
        let params = RunParams {
            question_temperature: config.majority_temperature,
            seed: Some(base.wrapping_add(u64::from(i))),
        };
        match examine(claim, examiner, examinee, catalog, config, params) {
            Ok(t) => transcripts.push(t),
            Err(ExamError::Aborted { transcript, .. }) => transcripts.push(*transcript),
            Err(e) => return Err(e),
        }
    }
    let votes: Vec<Verdict> = transcripts.iter().map(Transcript::verdict).collect();
    Ok(MajorityOutcome {
        verdict: majority_verdict(&votes),
        transcripts,
    })
}
