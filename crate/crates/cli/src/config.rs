//! Run configuration file and backend construction.
//!
//! Relative paths inside the file resolve against the file's directory.
//! API keys never appear in the file; each remote backend names the
//! environment variable holding its key.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crossexam::backend::{
    record_wrap, Backend, BackendDescriptor, CacheBackend, HttpBackend, HttpBackendConfig, ReplayBackend,
    RetryPolicy, ScriptedBackend,
};
use crossexam::dataset::GenerationOptions;
use crossexam::{Capability, ExamConfig, PromptCatalog, Style};
use serde::{Deserialize, Serialize};

use crate::budget::{Budget, BudgetBackend};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Remote endpoint speaking the chat/completions wire format.
    Openai,
    /// Replies from a script file.
    Scripted,
    /// Replies from a recorded cassette only.
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    /// Record every call.
    Record,
    /// Serve recorded responses only; misses are errors.
    Replay,
    /// Serve recorded responses, call the backend and record on a miss.
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteConfig {
    pub path: PathBuf,
    pub mode: CassetteMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub style: Style,
    #[serde(default)]
    pub capabilities: BTreeSet<Capability>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry: Option<RetryPolicy>,
    /// Script file for scripted backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cassette: Option<CassetteConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcIdkConfig {
    /// Held-out claims and their dataset, used to pick demos.
    pub heldout_claims: PathBuf,
    pub heldout_dataset: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    crossexam::detectors::ICIDK_DEFAULT_K
}

fn default_d() -> usize {
    crossexam::detectors::ICIDK_DEFAULT_D
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceConfig {
    /// Training claims (with logprobs) and their dataset, used to fit the
    /// threshold.
    pub train_claims: PathBuf,
    pub train_dataset: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_overrides: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let d = GenerationOptions::default();
        Self {
            temperature: d.temperature,
            max_tokens: d.max_tokens,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_catalog: Option<PathBuf>,
    #[serde(default)]
    pub exam: ExamConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icidk: Option<IcIdkConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<ConfidenceConfig>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config: Config =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for b in config.backends.values_mut() {
            if let Some(s) = &mut b.script {
                resolve(base, s);
            }
            if let Some(c) = &mut b.cassette {
                resolve(base, &mut c.path);
            }
        }
        if let Some(p) = &mut config.prompt_catalog {
            resolve(base, p);
        }
        if let Some(i) = &mut config.icidk {
            resolve(base, &mut i.heldout_claims);
            resolve(base, &mut i.heldout_dataset);
        }
        if let Some(c) = &mut config.confidence {
            resolve(base, &mut c.train_claims);
            resolve(base, &mut c.train_dataset);
            if let Some(o) = &mut c.train_overrides {
                resolve(base, o);
            }
        }
        config.exam.validate()?;
        Ok(config)
    }

    pub fn catalog(&self) -> Result<PromptCatalog, CliError> {
        Ok(match &self.prompt_catalog {
            Some(p) => PromptCatalog::load_override(p)?,
            None => crossexam::prompts::builtin_catalog(),
        })
    }

    pub fn generation_options(&self, seed: Option<u64>) -> GenerationOptions {
        GenerationOptions {
            temperature: self.generation.temperature,
            max_tokens: self.generation.max_tokens,
            seed,
        }
    }

    pub fn backend_config(&self, name: &str) -> Result<&BackendConfig, CliError> {
        self.backends
            .get(name)
            .ok_or_else(|| CliError::Config(format!("no backend named `{name}` in config")))
    }

    pub fn descriptor(&self, name: &str) -> Result<BackendDescriptor, CliError> {
        let b = self.backend_config(name)?;
        let mut d = BackendDescriptor::new(name, b.style);
        d.capabilities = b.capabilities.clone();
        Ok(d)
    }

    /// Builds the named backend: base backend, then the call budget, then
    /// the cassette layer, so cached replies never count against the budget.
    pub fn build_backend(&self, name: &str, budget: &Arc<Budget>) -> Result<Arc<dyn Backend>, CliError> {
        let b = self.backend_config(name)?;
        let descriptor = self.descriptor(name)?;
        let missing = |field: &str| CliError::Config(format!("backend `{name}` needs `{field}`"));
        let base: Arc<dyn Backend> = match b.kind {
            BackendKind::Openai => {
                let api_key = match &b.api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        CliError::Config(format!("backend `{name}`: environment variable {var} is not set"))
                    })?),
                    None => None,
                };
                let config = HttpBackendConfig {
                    base_url: b.base_url.clone().ok_or_else(|| missing("base_url"))?,
                    model: b.model.clone().ok_or_else(|| missing("model"))?,
                    api_key,
                    timeout_secs: b.timeout_secs.unwrap_or(120),
                    retry: b.retry.unwrap_or_default(),
                };
                Arc::new(HttpBackend::new(descriptor.clone(), config)?)
            }
            BackendKind::Scripted => {
                let script = b.script.as_ref().ok_or_else(|| missing("script"))?;
                Arc::new(ScriptedBackend::from_file(script, descriptor.clone())?)
            }
            BackendKind::Replay => {
                let cassette = b.cassette.as_ref().ok_or_else(|| missing("cassette"))?;
                return Ok(Arc::new(ReplayBackend::open(&cassette.path, descriptor)?));
            }
        };
        let limited: Arc<dyn Backend> = Arc::new(BudgetBackend::new(base, budget.clone()));
        Ok(match &b.cassette {
            None => limited,
            Some(c) => match c.mode {
                CassetteMode::Record => Arc::new(record_wrap(limited, &c.path)?),
                CassetteMode::Replay => Arc::new(ReplayBackend::open(&c.path, descriptor)?),
                CassetteMode::Cache => Arc::new(CacheBackend::open(limited, &c.path)?),
            },
        })
    }
}
