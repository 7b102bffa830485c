//! Cross-examination of language-model claims.
//!
//! An *examiner* model interrogates the *examinee* model that produced a
//! claim over several turns, then decides whether the claim is correct.
//! The crate also carries the evaluation harness around that protocol:
//! baseline detectors, claim generation from QA datasets, gold labeling and
//! the precision/recall metrics used to score every detector.
//!
//! Numeric code (metrics, statistics, confidence thresholds) is generic over
//! the scalar type through [`num_traits::Float`]; the aliases exported at the
//! crate root fix the scalar to `f64`, which is what the CLI and the report
//! files use.

pub mod backend;
pub mod dataset;
pub mod detectors;
pub mod evaluation;
pub mod exam;
pub mod jsonl;
pub mod labeling;
pub mod prompts;

pub use backend::{
    Backend, BackendDescriptor, BackendError, Capability, ChatMessage, CompletionRequest,
    CompletionResponse, FinishReason, Role, Style,
};
pub use dataset::{GeneratedClaim, QAItem, QueryFormat};
pub use detectors::{ClaimContext, Detector, DetectorError, DetectorKind, DetectorOutcome};
pub use evaluation::{Counts, EvalRecord};
pub use exam::{ExamConfig, ExamError, RawDecision, Transcript, Turn, Verdict};
pub use labeling::{GoldLabel, OverrideEntry};
pub use prompts::{PromptCatalog, PromptKey, PromptTemplate, TemplateError};

/// Confidence-threshold model over `f64` scores.
pub type ConfidenceModel = detectors::ConfidenceModel<f64>;
/// Rejection/acceptance metrics over `f64`.
pub type MetricsReport = evaluation::MetricsReport<f64>;
/// Precision, recall and F1 for one side over `f64`.
pub type SideMetrics = evaluation::SideMetrics<f64>;
/// Examination statistics over `f64`.
pub type ExamStats = evaluation::ExamStats<f64>;
/// Mean and population standard deviation over `f64`.
pub type MeanStd = evaluation::MeanStd<f64>;
/// Versioned report document over `f64`.
pub type Report = evaluation::Report<f64>;
