//! Correctness detectors: the cross-examination method and its baselines
//! behind one [`Detector`] interface.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_traits::Float;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, ChatMessage, CompletionRequest};
use crate::dataset::{GeneratedClaim, GenerationOptions, QAItem, QueryFormat};
use crate::evaluation::{f1_score, Counts};
use crate::exam::{run_examination, run_majority, ExamConfig, ExamError, Transcript, Verdict};
use crate::labeling::{normalize, GoldLabel};
use crate::prompts::{PromptCatalog, PromptKey, TemplateError};

pub const ICIDK_DEFAULT_K: usize = 8;
pub const ICIDK_DEFAULT_D: usize = 2;
/// Target text of an IC-IDK demonstration the model got wrong.
pub const DONT_KNOW: &str = "Don't know";

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Exam(#[from] ExamError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid claim context for `{item_id}`: {reason}")]
    InvalidContext { item_id: String, reason: String },
    #[error(
        "not enough held-out examples for demos: need {need_failures} failures and {need_successes} successes, have {have_failures} and {have_successes}"
    )]
    Demo {
        need_failures: usize,
        have_failures: usize,
        need_successes: usize,
        have_successes: usize,
    },
    #[error("no in-context demos")]
    NoDemos,
    #[error("confidence of an empty logprob list is undefined")]
    EmptyLogprobs,
    #[error("threshold fit needs both gold classes; got {correct} correct and {incorrect} incorrect")]
    SingleClass { correct: usize, incorrect: usize },
    #[error("detector `{detector}` is unsupported: {reason}")]
    Unsupported { detector: String, reason: String },
    #[error("unknown detector `{0}`")]
    UnknownDetector(String),
}

/// Everything a detector may look at for one claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimContext {
    pub item_id: String,
    pub question: String,
    pub query_format: QueryFormat,
    pub claim: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claim_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_split_ref: Option<String>,
}

impl ClaimContext {
    pub fn new(item: &QAItem, claim: &GeneratedClaim) -> Self {
        Self {
            item_id: item.id.clone(),
            question: item.query.clone(),
            query_format: item.query_format,
            claim: claim.text.clone(),
            claim_logprobs: claim.token_logprobs.clone(),
            train_split_ref: None,
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let invalid = |reason: &str| DetectorError::InvalidContext {
            item_id: self.item_id.clone(),
            reason: reason.to_string(),
        };
        if self.claim.trim().is_empty() {
            return Err(invalid("claim is empty"));
        }
        if let Some(lp) = &self.claim_logprobs {
            if lp.iter().any(|v| v.is_nan() || *v > 0.0) {
                return Err(invalid("claim logprobs must all be <= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutcome {
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    /// Examinations run to reach the verdict, if any.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transcripts: Vec<Transcript>,
}

impl DetectorOutcome {
    pub fn new(verdict: Verdict) -> Self {
        Self {
            verdict,
            score: None,
            metadata: BTreeMap::new(),
            transcripts: Vec::new(),
        }
    }

    pub fn meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    /// True when the verdict came from a conservative default rather than a
    /// parsed reply.
    pub fn is_flagged(&self) -> bool {
        self.metadata.contains_key("flag")
    }
}

pub trait Detector: Send + Sync {
    fn kind(&self) -> DetectorKind;
    fn detect(&self, ctx: &ClaimContext) -> Result<DetectorOutcome, DetectorError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectorKind {
    #[serde(rename = "lmvlm")]
    Lmvlm,
    #[serde(rename = "lmvlm-majority")]
    LmvlmMajority,
    #[serde(rename = "ays")]
    Ays,
    #[serde(rename = "idk")]
    Idk,
    #[serde(rename = "ic-idk")]
    IcIdk,
    #[serde(rename = "confidence")]
    Confidence,
    #[serde(rename = "ays+lmvlm")]
    AysLmvlm,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 7] = [
        DetectorKind::Confidence,
        DetectorKind::Ays,
        DetectorKind::Idk,
        DetectorKind::IcIdk,
        DetectorKind::Lmvlm,
        DetectorKind::LmvlmMajority,
        DetectorKind::AysLmvlm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::Lmvlm => "lmvlm",
            DetectorKind::LmvlmMajority => "lmvlm-majority",
            DetectorKind::Ays => "ays",
            DetectorKind::Idk => "idk",
            DetectorKind::IcIdk => "ic-idk",
            DetectorKind::Confidence => "confidence",
            DetectorKind::AysLmvlm => "ays+lmvlm",
        }
    }

    /// Whether the detector runs the cross-examination protocol.
    pub fn uses_examiner(self) -> bool {
        matches!(
            self,
            DetectorKind::Lmvlm | DetectorKind::LmvlmMajority | DetectorKind::AysLmvlm
        )
    }

    pub fn requires_logprobs(self) -> bool {
        self == DetectorKind::Confidence
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DetectorKind {
    type Err = DetectorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DetectorError::UnknownDetector(s.to_string()))
    }
}

fn request(messages: Vec<ChatMessage>, opts: &GenerationOptions) -> CompletionRequest {
    CompletionRequest::new(messages)
        .temperature(opts.temperature)
        .max_tokens(opts.max_tokens)
        .seed(opts.seed)
}

fn first_word(text: &str) -> String {
    text.split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// The query as the examinee first saw it.
fn question_prompt(ctx: &ClaimContext, catalog: &PromptCatalog, backend: &dyn Backend) -> Result<String, TemplateError> {
    match ctx.query_format {
        QueryFormat::Question => catalog
            .get(PromptKey::ClaimFromQuestion, backend.descriptor().style)?
            .render([("question", ctx.question.as_str())]),
        QueryFormat::FillBlank => Ok(ctx.question.clone()),
    }
}

/// Asks the model whether it is sure of its claim. "No" rejects, "Yes"
/// accepts, anything else rejects and sets the `flag` metadata entry.
pub fn detect_ays(
    ctx: &ClaimContext,
    backend: &dyn Backend,
    catalog: &PromptCatalog,
    opts: &GenerationOptions,
) -> Result<DetectorOutcome, DetectorError> {
    ctx.validate()?;
    let style = backend.descriptor().style;
    let messages = vec![
        ChatMessage::user(question_prompt(ctx, catalog, backend)?),
        ChatMessage::assistant(ctx.claim.clone()),
        ChatMessage::user(catalog.text(PromptKey::Ays, style)?),
    ];
    let reply = backend.complete(&request(messages, opts))?.text;
    let outcome = match first_word(&reply).as_str() {
        "yes" => DetectorOutcome::new(Verdict::Accept),
        "no" => DetectorOutcome::new(Verdict::Reject),
        _ => DetectorOutcome::new(Verdict::Reject).meta("flag", "unparseable"),
    };
    Ok(outcome.meta("reply", reply))
}

fn says_dont_know(reply: &str, phrase: &str) -> bool {
    normalize(reply).contains(phrase)
}

/// Re-asks the question allowing an "I don't know" answer, which rejects.
pub fn detect_idk(
    ctx: &ClaimContext,
    backend: &dyn Backend,
    catalog: &PromptCatalog,
    opts: &GenerationOptions,
) -> Result<DetectorOutcome, DetectorError> {
    ctx.validate()?;
    let style = backend.descriptor().style;
    let prompt = format!(
        "{} {}",
        question_prompt(ctx, catalog, backend)?,
        catalog.text(PromptKey::IdkSuffix, style)?
    );
    let reply = backend.complete(&request(vec![ChatMessage::user(prompt)], opts))?.text;
    let outcome = if reply.trim().is_empty() {
        DetectorOutcome::new(Verdict::Reject).meta("flag", "empty reply")
    } else if says_dont_know(&reply, "i don't know") {
        DetectorOutcome::new(Verdict::Reject)
    } else {
        DetectorOutcome::new(Verdict::Accept)
    };
    Ok(outcome.meta("reply", reply))
}

/// One in-context demonstration for IC-IDK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub query: String,
    pub target: String,
}

/// Held-out example: the item, the model's answer to it, and that answer's
/// gold label.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOut {
    pub item: QAItem,
    pub answer: String,
    pub label: GoldLabel,
}

/// Samples `d` "Don't know" demos from held-out failures and `k - d` gold
/// answer demos from successes, then shuffles them; all seeded.
pub fn build_icidk_demos(heldout: &[HeldOut], k: usize, d: usize, seed: u64) -> Result<Vec<Demo>, DetectorError> {
    let failures: Vec<&HeldOut> = heldout.iter().filter(|h| h.label == GoldLabel::Incorrect).collect();
    let successes: Vec<&HeldOut> = heldout.iter().filter(|h| h.label == GoldLabel::Correct).collect();
    let need_successes = k.saturating_sub(d);
    if d > k || failures.len() < d || successes.len() < need_successes {
        return Err(DetectorError::Demo {
            need_failures: d,
            have_failures: failures.len(),
            need_successes,
            have_successes: successes.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut demos: Vec<Demo> = index::sample(&mut rng, failures.len(), d)
        .into_iter()
        .map(|i| Demo {
            query: failures[i].item.query.clone(),
            target: DONT_KNOW.to_string(),
        })
        .collect();
    demos.extend(
        index::sample(&mut rng, successes.len(), need_successes)
            .into_iter()
            .map(|i| Demo {
                query: successes[i].item.query.clone(),
                target: successes[i].item.gold_answer.clone(),
            }),
    );
    demos.shuffle(&mut rng);
    Ok(demos)
}

pub fn icidk_prompt(demos: &[Demo], query: &str) -> String {
    let mut out = String::new();
    for d in demos {
        out.push_str(&format!("Q: {}\nA: {}\n\n", d.query, d.target));
    }
    out.push_str(&format!("Q: {query}\nA:"));
    out
}

/// Few-shot prompt with "Don't know" demos; a "don't know" reply rejects.
pub fn detect_icidk(
    ctx: &ClaimContext,
    demos: &[Demo],
    backend: &dyn Backend,
    opts: &GenerationOptions,
) -> Result<DetectorOutcome, DetectorError> {
    ctx.validate()?;
    if demos.is_empty() {
        return Err(DetectorError::NoDemos);
    }
    let prompt = icidk_prompt(demos, &ctx.question);
    let reply = backend.complete(&request(vec![ChatMessage::user(prompt)], opts))?.text;
    let outcome = if reply.trim().is_empty() {
        DetectorOutcome::new(Verdict::Reject).meta("flag", "empty reply")
    } else if says_dont_know(&reply, "don't know") {
        DetectorOutcome::new(Verdict::Reject)
    } else {
        DetectorOutcome::new(Verdict::Accept)
    };
    Ok(outcome.meta("reply", reply))
}

/// Product of token probabilities, computed as `exp(sum(logprobs))`.
pub fn claim_confidence<T: Float>(logprobs: &[T]) -> Result<T, DetectorError> {
    if logprobs.is_empty() {
        return Err(DetectorError::EmptyLogprobs);
    }
    Ok(logprobs.iter().fold(T::zero(), |acc, &lp| acc + lp).exp())
}

/// A fitted confidence threshold. Scores below `threshold` are rejected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceModel<T> {
    pub threshold: T,
    /// Rejection-side F1 reached on the training split.
    pub fit_f1: T,
}

impl<T: Float> ConfidenceModel<T> {
    pub fn verdict(&self, confidence: T) -> Verdict {
        if confidence < self.threshold {
            Verdict::Reject
        } else {
            Verdict::Accept
        }
    }
}

/// Rejection-side counts for "reject iff score < threshold".
pub fn threshold_counts<T: Float>(train: &[(T, GoldLabel)], threshold: T) -> Counts {
    let mut c = Counts::default();
    for &(score, label) in train {
        c.add(label, if score < threshold { Verdict::Reject } else { Verdict::Accept });
    }
    c
}

/// Picks the threshold maximizing rejection-side F1 over `-inf`, `+inf` and
/// the midpoints between consecutive distinct scores. Ties go to the smaller
/// threshold. Excluded points are ignored.
pub fn fit_confidence_threshold<T: Float>(train: &[(T, GoldLabel)]) -> Result<ConfidenceModel<T>, DetectorError> {
    let mut points: Vec<(T, bool)> = train
        .iter()
        .filter(|(_, l)| *l != GoldLabel::Excluded)
        .map(|&(s, l)| (s, l == GoldLabel::Incorrect))
        .collect();
    let incorrect = points.iter().filter(|p| p.1).count();
    let correct = points.len() - incorrect;
    if incorrect == 0 || correct == 0 {
        return Err(DetectorError::SingleClass { correct, incorrect });
    }
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("confidence scores are not NaN"));

    let f1_at = |tp: usize, fp: usize| -> T {
        let fn_ = incorrect - tp;
        f1_score(tp, fp, fn_)
    };
    // Threshold -inf rejects nothing.
    let mut best = ConfidenceModel {
        threshold: T::neg_infinity(),
        fit_f1: f1_at(0, 0),
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < points.len() {
        let value = points[i].0;
        while i < points.len() && points[i].0 == value {
            if points[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = match points.get(i) {
            Some(next) => (value + next.0) / (T::one() + T::one()),
            None => T::infinity(),
        };
        let f1 = f1_at(tp, fp);
        if f1 > best.fit_f1 {
            best = ConfidenceModel { threshold, fit_f1: f1 };
        }
    }
    Ok(best)
}

pub fn detect_confidence(ctx: &ClaimContext, model: &ConfidenceModel<f64>) -> Result<DetectorOutcome, DetectorError> {
    ctx.validate()?;
    let logprobs = ctx.claim_logprobs.as_deref().ok_or_else(|| DetectorError::Unsupported {
        detector: DetectorKind::Confidence.to_string(),
        reason: format!("claim `{}` has no token logprobs", ctx.item_id),
    })?;
    let score = claim_confidence(logprobs)?;
    let mut out = DetectorOutcome::new(model.verdict(score)).meta("threshold", model.threshold.to_string());
    out.score = Some(score);
    Ok(out)
}

fn exam_metadata(out: DetectorOutcome, t: &Transcript) -> DetectorOutcome {
    let out = out
        .meta("decision", t.decision.source_text.clone())
        .meta("questions_total", t.counters.questions_total.to_string());
    if t.decision.inconclusive {
        out.meta("flag", "inconclusive")
    } else {
        out
    }
}

/// Cross-examination, either a single run or the majority of
/// `config.majority_runs` runs.
pub fn detect_lmvlm(
    ctx: &ClaimContext,
    examiner: &dyn Backend,
    examinee: &dyn Backend,
    catalog: &PromptCatalog,
    config: &ExamConfig,
    majority: bool,
) -> Result<DetectorOutcome, DetectorError> {
    ctx.validate()?;
    if majority {
        let m = run_majority(&ctx.claim, examiner, examinee, catalog, config)?;
        let votes: Vec<String> = m.transcripts.iter().map(|t| t.verdict().to_string()).collect();
        let mut out = DetectorOutcome::new(m.verdict).meta("votes", votes.join(","));
        if m.transcripts.iter().any(|t| t.aborted.is_some()) {
            out = out.meta("flag", "aborted run");
        }
        out.transcripts = m.transcripts;
        Ok(out)
    } else {
        let t = run_examination(&ctx.claim, examiner, examinee, catalog, config)?;
        let mut out = exam_metadata(DetectorOutcome::new(t.verdict()), &t);
        out.transcripts.push(t);
        Ok(out)
    }
}

/// AYS first; only claims it rejects go on to a majority cross-examination,
/// whose verdict is final.
#[allow(clippy::too_many_arguments)]
pub fn detect_ensemble(
    ctx: &ClaimContext,
    examinee: &dyn Backend,
    examiner: &dyn Backend,
    catalog: &PromptCatalog,
    ays_opts: &GenerationOptions,
    config: &ExamConfig,
) -> Result<DetectorOutcome, DetectorError> {
    let ays = detect_ays(ctx, examinee, catalog, ays_opts)?;
    if ays.verdict == Verdict::Accept {
        return Ok(ays.meta("stage", "ays"));
    }
    Ok(detect_lmvlm(ctx, examiner, examinee, catalog, config, true)?.meta("stage", "lmvlm-majority"))
}

/// A [`Detector`] built from shared backends and settings.
pub enum DetectorImpl {
    Ays {
        backend: Arc<dyn Backend>,
        catalog: Arc<PromptCatalog>,
        opts: GenerationOptions,
    },
    Idk {
        backend: Arc<dyn Backend>,
        catalog: Arc<PromptCatalog>,
        opts: GenerationOptions,
    },
    IcIdk {
        backend: Arc<dyn Backend>,
        demos: Vec<Demo>,
        opts: GenerationOptions,
    },
    Confidence(ConfidenceModel<f64>),
    Lmvlm {
        examiner: Arc<dyn Backend>,
        examinee: Arc<dyn Backend>,
        catalog: Arc<PromptCatalog>,
        config: ExamConfig,
        majority: bool,
    },
    Ensemble {
        examiner: Arc<dyn Backend>,
        examinee: Arc<dyn Backend>,
        catalog: Arc<PromptCatalog>,
        opts: GenerationOptions,
        config: ExamConfig,
    },
}

impl Detector for DetectorImpl {
    fn kind(&self) -> DetectorKind {
        match self {
            DetectorImpl::Ays { .. } => DetectorKind::Ays,
            DetectorImpl::Idk { .. } => DetectorKind::Idk,
            DetectorImpl::IcIdk { .. } => DetectorKind::IcIdk,
            DetectorImpl::Confidence(_) => DetectorKind::Confidence,
            DetectorImpl::Lmvlm { majority: false, .. } => DetectorKind::Lmvlm,
            DetectorImpl::Lmvlm { majority: true, .. } => DetectorKind::LmvlmMajority,
            DetectorImpl::Ensemble { .. } => DetectorKind::AysLmvlm,
        }
    }

    fn detect(&self, ctx: &ClaimContext) -> Result<DetectorOutcome, DetectorError> {
        match self {
            DetectorImpl::Ays { backend, catalog, opts } => detect_ays(ctx, backend.as_ref(), catalog, opts),
            DetectorImpl::Idk { backend, catalog, opts } => detect_idk(ctx, backend.as_ref(), catalog, opts),
            DetectorImpl::IcIdk { backend, demos, opts } => detect_icidk(ctx, demos, backend.as_ref(), opts),
            DetectorImpl::Confidence(model) => detect_confidence(ctx, model),
            DetectorImpl::Lmvlm {
                examiner,
                examinee,
                catalog,
                config,
                majority,
            } => detect_lmvlm(ctx, examiner.as_ref(), examinee.as_ref(), catalog, config, *majority),
            DetectorImpl::Ensemble {
                examiner,
                examinee,
                catalog,
                opts,
                config,
            } => detect_ensemble(ctx, examinee.as_ref(), examiner.as_ref(), catalog, opts, config),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::prompts::builtin_catalog;

    fn ctx() -> ClaimContext {
        ClaimContext {
            item_id: "q".into(),
            question: "What is the capital of France?".into(),
            query_format: QueryFormat::Question,
            claim: "The capital of France is Paris.".into(),
            claim_logprobs: Some(vec![-0.1, -0.2]),
            train_split_ref: None,
        }
    }

    fn seq(replies: &[&str]) -> ScriptedBackend {
        ScriptedBackend::sequence(replies.iter().copied()).unwrap()
    }

    fn opts() -> GenerationOptions {
        GenerationOptions::default()
    }

    #[test]
    fn registry_names_round_trip() {
        let names = ["lmvlm", "lmvlm-majority", "ays", "idk", "ic-idk", "confidence", "ays+lmvlm"];
        for n in names {
            assert_eq!(n.parse::<DetectorKind>().unwrap().as_str(), n);
            let json = serde_json::to_string(&n.parse::<DetectorKind>().unwrap()).unwrap();
            assert_eq!(json, format!("\"{n}\""));
        }
        assert!("lmvlm_majority".parse::<DetectorKind>().is_err());
    }

    #[test]
    fn ays_mapping() {
        let cat = builtin_catalog();
        assert_eq!(detect_ays(&ctx(), &seq(&["Yes"]), &cat, &opts()).unwrap().verdict, Verdict::Accept);
        assert_eq!(detect_ays(&ctx(), &seq(&["No."]), &cat, &opts()).unwrap().verdict, Verdict::Reject);
        for reply in ["Possibly", "Not sure", "", "I think so", "Yesterday", "Nope, yes"] {
            let out = detect_ays(&ctx(), &seq(&[reply]), &cat, &opts()).unwrap();
            assert_eq!(out.verdict, Verdict::Reject, "{reply}");
            assert!(out.is_flagged(), "{reply}");
        }
    }

    #[test]
    fn ays_prompt_follows_claim() {
        let b = ScriptedBackend::map([(
            "Are you sure regarding the correctness of your claim? Please answer with Yes or No",
            "Yes",
        )])
        .unwrap();
        assert_eq!(detect_ays(&ctx(), &b, &builtin_catalog(), &opts()).unwrap().verdict, Verdict::Accept);
    }

    #[test]
    fn idk_mapping() {
        let cat = builtin_catalog();
        let run = |r: &str| detect_idk(&ctx(), &seq(&[r]), &cat, &opts()).unwrap();
        assert_eq!(run("I don't know").verdict, Verdict::Reject);
        assert_eq!(run("I DON\u{2019}T KNOW.").verdict, Verdict::Reject);
        assert_eq!(run("Paris is the capital of France.").verdict, Verdict::Accept);
        assert!(run(" ").is_flagged());
    }

    #[test]
    fn idk_prompt_text() {
        let b = ScriptedBackend::map([(
            "Please answer the following question: What is the capital of France? If you are not sure you know the answer, answer with 'I don't know' only.",
            "Paris",
        )])
        .unwrap();
        assert_eq!(detect_idk(&ctx(), &b, &builtin_catalog(), &opts()).unwrap().verdict, Verdict::Accept);
    }

    fn heldout(failures: usize, successes: usize) -> Vec<HeldOut> {
        (0..failures + successes)
            .map(|i| HeldOut {
                item: QAItem {
                    id: format!("h{i}"),
                    dataset: "lama".into(),
                    query: format!("query {i}"),
                    query_format: QueryFormat::Question,
                    gold_answer: format!("gold {i}"),
                    aliases: vec![],
                },
                answer: format!("answer {i}"),
                label: if i < failures { GoldLabel::Incorrect } else { GoldLabel::Correct },
            })
            .collect()
    }

    #[test]
    fn icidk_demos() {
        let pool = heldout(5, 20);
        let demos = build_icidk_demos(&pool, 8, 2, 1).unwrap();
        assert_eq!(demos.len(), 8);
        assert_eq!(demos.iter().filter(|d| d.target == DONT_KNOW).count(), 2);
        assert_eq!(demos, build_icidk_demos(&pool, 8, 2, 1).unwrap());
        for d in demos.iter().filter(|d| d.target != DONT_KNOW) {
            let i: usize = d.query.trim_start_matches("query ").parse().unwrap();
            assert!(i >= 5);
            assert_eq!(d.target, format!("gold {i}"));
        }
        let err = build_icidk_demos(&heldout(1, 20), 8, 2, 1).unwrap_err();
        assert!(err.to_string().contains("need 2 failures"), "{err}");
        assert!(err.to_string().contains("have 1"), "{err}");
    }

    #[test]
    fn icidk_detect() {
        let demos = build_icidk_demos(&heldout(5, 20), 8, 2, 1).unwrap();
        let run = |r: &str| detect_icidk(&ctx(), &demos, &seq(&[r]), &opts()).unwrap();
        assert_eq!(run("Don't know").verdict, Verdict::Reject);
        assert_eq!(run("Paris").verdict, Verdict::Accept);
        let empty = run("");
        assert_eq!(empty.verdict, Verdict::Reject);
        assert!(empty.is_flagged());
        assert!(matches!(
            detect_icidk(&ctx(), &[], &seq(&["x"]), &opts()),
            Err(DetectorError::NoDemos)
        ));
        let p = icidk_prompt(&demos, "What is the capital of France?");
        assert!(p.ends_with("Q: What is the capital of France?\nA:"));
        assert_eq!(p.matches("Q: ").count(), 9);
    }

    #[test]
    fn confidence_values() {
        let v = claim_confidence(&[0.5f64.ln(), 0.5f64.ln()]).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        assert_eq!(claim_confidence(&[0.0f64]).unwrap(), 1.0);
        assert!(claim_confidence::<f64>(&[]).is_err());
        let v32 = claim_confidence(&[0.5f32.ln()]).unwrap();
        assert!((v32 - 0.5).abs() < 1e-6);
    }

    #[test]
    fn threshold_two_points() {
        let m = fit_confidence_threshold(&[(0.9, GoldLabel::Correct), (0.1, GoldLabel::Incorrect)]).unwrap();
        assert_eq!(m.threshold, 0.5);
        assert_eq!(m.fit_f1, 1.0);
        assert_eq!(m.verdict(0.1), Verdict::Reject);
        assert_eq!(m.verdict(0.9), Verdict::Accept);
    }

    #[test]
    fn threshold_single_class() {
        assert!(matches!(
            fit_confidence_threshold(&[(0.9, GoldLabel::Correct), (0.3, GoldLabel::Correct)]),
            Err(DetectorError::SingleClass { correct: 2, incorrect: 0 })
        ));
    }

    #[test]
    fn confidence_detector_needs_logprobs() {
        let model = ConfidenceModel { threshold: 0.5, fit_f1: 1.0 };
        let mut c = ctx();
        let out = detect_confidence(&c, &model).unwrap();
        assert_eq!(out.verdict, Verdict::Accept);
        assert!((out.score.unwrap() - (-0.3f64).exp()).abs() < 1e-12);
        c.claim_logprobs = None;
        assert!(matches!(detect_confidence(&c, &model), Err(DetectorError::Unsupported { .. })));
        c.claim_logprobs = Some(vec![0.1]);
        assert!(matches!(detect_confidence(&c, &model), Err(DetectorError::InvalidContext { .. })));
    }

    fn vote(verdict: &str) -> Vec<&'static str> {
        let decision = if verdict == "A" { "The claim is correct." } else { "The claim is incorrect." };
        vec!["Q?", "No", decision]
    }

    #[test]
    fn lmvlm_majority_votes() {
        let cat = builtin_catalog();
        let cfg = ExamConfig::default();
        for (votes, expected) in [
            (["A", "R", "R"], Verdict::Reject),
            (["A", "A", "R"], Verdict::Accept),
        ] {
            let replies: Vec<&str> = votes.iter().flat_map(|v| vote(v)).collect();
            let examiner = seq(&replies);
            let examinee = seq(&["a", "a", "a"]);
            let out = detect_lmvlm(&ctx(), &examiner, &examinee, &cat, &cfg, true).unwrap();
            assert_eq!(out.verdict, expected);
            assert_eq!(out.transcripts.len(), 3);
        }
    }

    #[test]
    fn single_run_abort_is_error() {
        let out = detect_lmvlm(&ctx(), &seq(&["Q?"]), &seq(&["x"]), &builtin_catalog(), &ExamConfig::default(), false);
        assert!(matches!(out, Err(DetectorError::Exam(ExamError::Aborted { .. }))));
    }

    #[test]
    fn ensemble_stages() {
        let cat = builtin_catalog();
        let cfg = ExamConfig::default();
        let examiner = seq(&["unused"]);
        let examinee = seq(&["Yes"]);
        let out = detect_ensemble(&ctx(), &examinee, &examiner, &cat, &opts(), &cfg).unwrap();
        assert_eq!(out.verdict, Verdict::Accept);
        assert_eq!(examiner.calls(), 0);

        for (decision, expected) in [("incorrect", Verdict::Reject), ("correct", Verdict::Accept)] {
            let replies: Vec<&str> = (0..3).flat_map(|_| ["Q?", "No", decision]).collect();
            let examiner = seq(&replies);
            let examinee = seq(&["No", "a", "a", "a"]);
            let out = detect_ensemble(&ctx(), &examinee, &examiner, &cat, &opts(), &cfg).unwrap();
            assert_eq!(out.verdict, expected);
            assert_eq!(out.metadata["stage"], "lmvlm-majority");
        }
    }
}
