//! Backend-call budget shared by every backend of a run.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use crossexam::backend::{Backend, BackendDescriptor, BackendError, CompletionRequest, CompletionResponse};

#[derive(Debug)]
pub struct Budget {
    limit: Option<u64>,
    used: AtomicU64,
    exhausted: AtomicBool,
}

impl Budget {
    pub fn new(limit: Option<u64>) -> Self {
        Self {
            limit,
            used: AtomicU64::new(0),
            exhausted: AtomicBool::new(false),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(None)
    }

    /// Reserves one call, failing once the limit is reached.
    pub fn take(&self) -> Result<(), BackendError> {
        let used = self.used.fetch_add(1, Ordering::SeqCst);
        match self.limit {
            Some(limit) if used >= limit => {
                self.used.fetch_sub(1, Ordering::SeqCst);
                self.exhausted.store(true, Ordering::SeqCst);
                Err(BackendError::BudgetExhausted(limit))
            }
            _ => Ok(()),
        }
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted.load(Ordering::SeqCst)
    }
}

pub struct BudgetBackend {
    inner: Arc<dyn Backend>,
    budget: Arc<Budget>,
}

impl BudgetBackend {
    pub fn new(inner: Arc<dyn Backend>, budget: Arc<Budget>) -> Self {
        Self { inner, budget }
    }
}

impl Backend for BudgetBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.budget.take()?;
        self.inner.complete(request)
    }
}
