//! Command-line driver: run configuration, bounded-concurrency execution,
//! call budgets and the append-only result store.

pub mod budget;
pub mod commands;
pub mod config;
pub mod store;

use std::path::PathBuf;

use crossexam::dataset::{DatasetError, GenerationError};
use crossexam::detectors::DetectorError;
use crossexam::evaluation::EvalError;
use crossexam::jsonl::JsonlError;
use crossexam::labeling::OverrideError;
use crossexam::{BackendError, ExamError, TemplateError};

pub use commands::{Cli, Command};
pub use store::{StoreError, TranscriptStore};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
    #[error(transparent)]
    Override(#[from] OverrideError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Exam(#[from] ExamError),
    /// Resuming with settings that differ from the interrupted run.
    #[error("cannot resume: {0}")]
    RunMismatch(String),
    #[error("records without a gold label: {}", .0.join(", "))]
    Unlabeled(Vec<String>),
    #[error("claims reference items missing from the dataset: {}", .0.join(", "))]
    MissingItems(Vec<String>),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
