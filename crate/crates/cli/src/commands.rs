//! Subcommands. Each returns a serializable summary; `main` prints it.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use crossexam::dataset::{
    generate_claim, generate_falsehood, load_dataset, sample_subset, ClaimMode, FalsehoodOutcome, GeneratedClaim,
    QueryFormat,
};
use crossexam::detectors::{
    build_icidk_demos, claim_confidence, fit_confidence_threshold, ClaimContext, Detector, DetectorError,
    DetectorImpl, DetectorKind, HeldOut,
};
use crossexam::evaluation::{
    compute_exam_stats, emit_report, falsehood_accuracy, metrics_report, EvalRecord, FalsehoodResult,
    LabeledExamStats, ReportFormat,
};
use crossexam::labeling::{apply_overrides, auto_label};
use crossexam::{jsonl, Backend, ExamConfig, ExamError, GoldLabel, OverrideEntry, QAItem, Report, Transcript};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::budget::Budget;
use crate::config::Config;
use crate::store::{
    repair_trailing_line, RunCounts, RunManifest, RunStatus, StoredRecord, StoredTranscript, TranscriptStore,
    STORE_SCHEMA_VERSION,
};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "crossexam", version, about = "Detect factual errors by cross-examining language models")]
pub struct Cli {
    /// JSON run configuration (backends, prompt override, exam defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer dataset queries and turn the answers into claims.
    GenerateClaims(GenerateArgs),
    /// Run a detector over a claims file.
    Examine(ExamineArgs),
    /// Score stored verdicts against gold labels.
    Evaluate(EvaluateArgs),
    /// Generate verified-false claims.
    Falsehoods(GenerateArgs),
    /// Examination statistics over stored transcripts.
    Stats(StatsArgs),
    /// Print the stored examination of one item.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Config backend that answers the queries.
    #[arg(long)]
    pub examinee: String,
    /// Claims file (JSON Lines); an existing file is resumed.
    #[arg(long)]
    pub out: PathBuf,
    /// Sample this many items instead of using the whole dataset.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub max_backend_calls: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ExamineArgs {
    #[arg(long)]
    pub claims: PathBuf,
    /// Dataset the claims came from; required by ays, idk and ic-idk.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub examiner: Option<String>,
    #[arg(long)]
    pub examinee: String,
    #[arg(long)]
    pub detector: DetectorKind,
    #[arg(long, default_value = "store")]
    pub store: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the follow-up stage of the examination.
    #[arg(long)]
    pub no_followups: bool,
    /// Use the majority vote of several examinations.
    #[arg(long)]
    pub majority: bool,
    #[arg(long)]
    pub max_backend_calls: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long, default_value = "store")]
    pub store: PathBuf,
    /// Gold labels, one `{"item_id", "label"}` object per line.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Claims to label automatically (with --dataset) when no labels file
    /// is given; a file of falsehoods also adds falsehood accuracy.
    #[arg(long)]
    pub claims: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub overrides: Option<PathBuf>,
    #[arg(long)]
    pub detector: Option<String>,
    #[arg(long, default_value = "markdown")]
    pub format: ReportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long, default_value = "store")]
    pub store: PathBuf,
    #[arg(long)]
    pub detector: Option<String>,
    #[arg(long, default_value = "markdown")]
    pub format: ReportFormat,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long, default_value = "store")]
    pub store: PathBuf,
    #[arg(long)]
    pub item: String,
    #[arg(long)]
    pub detector: Option<String>,
}

/// What a command hands back to `main`.
#[derive(Debug)]
pub struct Output {
    pub text: String,
    pub budget_exhausted: bool,
}

pub fn run(cli: &Cli) -> Result<Output, CliError> {
    let config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    Ok(match &cli.command {
        Command::GenerateClaims(a) => {
            let s = generate_claims(&config, a)?;
            Output {
                text: pretty(&s),
                budget_exhausted: s.budget_exhausted,
            }
        }
        Command::Falsehoods(a) => {
            let s = falsehoods(&config, a)?;
            Output {
                text: pretty(&s),
                budget_exhausted: s.budget_exhausted,
            }
        }
        Command::Examine(a) => {
            let s = examine(&config, a)?;
            Output {
                text: pretty(&s),
                budget_exhausted: s.budget_exhausted,
            }
        }
        Command::Evaluate(a) => {
            let report = evaluate(a)?;
            let text = emit_report(&report, a.format);
            match &a.out {
                Some(path) => {
                    std::fs::write(path, &text).map_err(|e| CliError::io(path, e))?;
                    Output {
                        text: format!("wrote {}", path.display()),
                        budget_exhausted: false,
                    }
                }
                None => Output {
                    text,
                    budget_exhausted: false,
                },
            }
        }
        Command::Stats(a) => Output {
            text: emit_report(&stats(a)?, a.format),
            budget_exhausted: false,
        },
        Command::Replay(a) => Output {
            text: replay(a)?,
            budget_exhausted: false,
        },
    })
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("summaries serialize")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub counts: RunCounts,
    /// Items tried in this run.
    pub attempted: usize,
    /// Falsehood items whose every attempt still mentioned the answer.
    pub discarded: usize,
    pub failures: Vec<ItemFailure>,
    pub budget_exhausted: bool,
    pub backend_calls: u64,
}

impl GenerationSummary {
    pub fn kept(&self) -> usize {
        self.counts.completed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamineSummary {
    pub run_id: String,
    pub detector: String,
    pub counts: RunCounts,
    pub failures: Vec<ItemFailure>,
    pub budget_exhausted: bool,
    pub backend_calls: u64,
}

/// Settings of a claims file, stored next to it so a resumed run can be
/// checked against the original.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimsManifest {
    pub schema_version: u32,
    pub mode: ClaimMode,
    pub dataset: PathBuf,
    pub backend: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub n: Option<usize>,
}

/// `<path><suffix>`, e.g. `claims.jsonl.manifest.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn check_claims_manifest(out: &Path, manifest: &ClaimsManifest) -> Result<(), CliError> {
    let path = sidecar(out, ".manifest.json");
    match std::fs::read_to_string(&path) {
        Ok(text) => {
            let old: ClaimsManifest =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let mut diffs = Vec::new();
            if old.seed != manifest.seed {
                diffs.push(format!("seed {:?} != {:?}", manifest.seed, old.seed));
            }
            if old.mode != manifest.mode {
                diffs.push(format!("mode {:?} != {:?}", manifest.mode, old.mode));
            }
            if old.backend != manifest.backend {
                diffs.push(format!("backend {} != {}", manifest.backend, old.backend));
            }
            if old.n != manifest.n {
                diffs.push(format!("n {:?} != {:?}", manifest.n, old.n));
            }
            if old.dataset != manifest.dataset {
                diffs.push(format!("dataset {} != {}", manifest.dataset.display(), old.dataset.display()));
            }
            if diffs.is_empty() {
                Ok(())
            } else {
                Err(CliError::RunMismatch(format!(
                    "{} was written with different settings: {}",
                    out.display(),
                    diffs.join("; ")
                )))
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
            std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
        }
        Err(e) => Err(CliError::io(&path, e)),
    }
}

fn load_items(path: &Path) -> Result<Vec<QAItem>, CliError> {
    let loaded = load_dataset(path)?;
    for r in &loaded.rejects {
        eprintln!("{}:{}: skipped malformed item: {}", path.display(), r.line, r.reason);
    }
    Ok(loaded.items)
}

fn run_pool<T, F>(jobs: usize, items: &[T], f: F) -> Result<(), CliError>
where
    T: Sync,
    F: Fn(&T) -> Result<(), CliError> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| items.par_iter().try_for_each(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DiscardedItem {
    item_id: String,
    attempts: u32,
    last_text: String,
}

fn generate(config: &Config, args: &GenerateArgs, mode: ClaimMode) -> Result<GenerationSummary, CliError> {
    let all = load_items(&args.dataset)?;
    let items = match args.n {
        Some(n) => sample_subset(&all, n, args.seed.unwrap_or(0))?,
        None => all,
    };
    check_claims_manifest(
        &args.out,
        &ClaimsManifest {
            schema_version: STORE_SCHEMA_VERSION,
            mode,
            dataset: args.dataset.clone(),
            backend: args.examinee.clone(),
            seed: args.seed,
            n: args.n,
        },
    )?;
    let discarded_path = sidecar(&args.out, ".discarded.jsonl");
    let mut done: BTreeSet<String> = BTreeSet::new();
    for path in [&args.out, &discarded_path] {
        repair_trailing_line(path)?;
    }
    for c in jsonl::read_all_or_empty::<GeneratedClaim>(&args.out)? {
        done.insert(c.item_id);
    }
    for d in jsonl::read_all_or_empty::<DiscardedItem>(&discarded_path)? {
        done.insert(d.item_id);
    }
    let pending: Vec<&QAItem> = items.iter().filter(|i| !done.contains(&i.id)).collect();

    let budget = Arc::new(Budget::new(args.max_backend_calls));
    let backend = config.build_backend(&args.examinee, &budget)?;
    let catalog = config.catalog()?;
    let opts = config.generation_options(args.seed);

    let writer = Mutex::new(());
    let failures = Mutex::new(Vec::new());
    let tally = Mutex::new((0usize, 0usize, 0usize));
    run_pool(args.jobs, &pending, |item| {
        if budget.is_exhausted() {
            return Ok(());
        }
        let result = match mode {
            ClaimMode::Truthful => generate_claim(item, backend.as_ref(), &catalog, &opts).map(|claim| {
                FalsehoodOutcome::Kept { claim, attempts: 1 }
            }),
            ClaimMode::Falsehood => generate_falsehood(item, backend.as_ref(), &catalog, &opts),
        };
        if budget.is_exhausted() {
            return Ok(());
        }
        let _w = writer.lock().unwrap();
        let mut t = tally.lock().unwrap();
        t.0 += 1;
        match result {
            Ok(FalsehoodOutcome::Kept { claim, .. }) => {
                jsonl::append(&args.out, &[claim])?;
                t.1 += 1;
            }
            Ok(FalsehoodOutcome::Discarded { attempts, last_text }) => {
                jsonl::append(
                    &discarded_path,
                    &[DiscardedItem {
                        item_id: item.id.clone(),
                        attempts,
                        last_text,
                    }],
                )?;
                t.2 += 1;
            }
            Err(e) => failures.lock().unwrap().push(ItemFailure {
                item_id: item.id.clone(),
                error: e.to_string(),
            }),
        }
        Ok(())
    })?;
    let (attempted, kept, discarded) = *tally.lock().unwrap();
    let mut failures = failures.into_inner().unwrap();
    failures.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    Ok(GenerationSummary {
        counts: RunCounts {
            completed: kept,
            aborted: failures.len(),
            cached: items.len() - pending.len(),
        },
        attempted,
        discarded,
        failures,
        budget_exhausted: budget.is_exhausted(),
        backend_calls: budget.used(),
    })
}

pub fn generate_claims(config: &Config, args: &GenerateArgs) -> Result<GenerationSummary, CliError> {
    generate(config, args, ClaimMode::Truthful)
}

pub fn falsehoods(config: &Config, args: &GenerateArgs) -> Result<GenerationSummary, CliError> {
    generate(config, args, ClaimMode::Falsehood)
}

fn items_by_id(items: Vec<QAItem>) -> BTreeMap<String, QAItem> {
    items.into_iter().map(|i| (i.id.clone(), i)).collect()
}

fn missing_items(claims: &[GeneratedClaim], items: &BTreeMap<String, QAItem>) -> Result<(), CliError> {
    let missing: Vec<String> = claims
        .iter()
        .filter(|c| !items.contains_key(&c.item_id))
        .map(|c| c.item_id.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::MissingItems(missing))
    }
}

/// Labels from auto-labeling `claims` against `dataset`.
fn auto_labels(claims: &Path, dataset: &Path) -> Result<BTreeMap<String, GoldLabel>, CliError> {
    let claims: Vec<GeneratedClaim> = jsonl::read_all(claims)?;
    let items = items_by_id(load_items(dataset)?);
    missing_items(&claims, &items)?;
    Ok(claims
        .iter()
        .map(|c| (c.item_id.clone(), auto_label(c, &items[&c.item_id])))
        .collect())
}

fn build_detector(
    kind: DetectorKind,
    config: &Config,
    exam: &ExamConfig,
    examiner: Option<Arc<dyn Backend>>,
    examinee: Arc<dyn Backend>,
    seed: Option<u64>,
) -> Result<DetectorImpl, CliError> {
    let catalog = Arc::new(config.catalog()?);
    let opts = config.generation_options(seed);
    let examiner = || examiner.clone().ok_or_else(|| CliError::Usage(format!("detector {kind} needs --examiner")));
    Ok(match kind {
        DetectorKind::Ays => DetectorImpl::Ays {
            backend: examinee,
            catalog,
            opts,
        },
        DetectorKind::Idk => DetectorImpl::Idk {
            backend: examinee,
            catalog,
            opts,
        },
        DetectorKind::IcIdk => {
            let c = config
                .icidk
                .as_ref()
                .ok_or_else(|| CliError::Config("detector ic-idk needs an `icidk` section".into()))?;
            let claims: Vec<GeneratedClaim> = jsonl::read_all(&c.heldout_claims)?;
            let items = items_by_id(load_items(&c.heldout_dataset)?);
            missing_items(&claims, &items)?;
            let heldout: Vec<HeldOut> = claims
                .iter()
                .map(|claim| {
                    let item = items[&claim.item_id].clone();
                    HeldOut {
                        label: auto_label(claim, &item),
                        answer: claim.text.clone(),
                        item,
                    }
                })
                .collect();
            DetectorImpl::IcIdk {
                backend: examinee,
                demos: build_icidk_demos(&heldout, c.k, c.d, c.seed)?,
                opts,
            }
        }
        DetectorKind::Confidence => {
            let c = config
                .confidence
                .as_ref()
                .ok_or_else(|| CliError::Config("detector confidence needs a `confidence` section".into()))?;
            let mut labels = auto_labels(&c.train_claims, &c.train_dataset)?;
            if let Some(path) = &c.train_overrides {
                labels = apply_overrides(labels, &jsonl::read_all::<OverrideEntry>(path)?)?;
            }
            let claims: Vec<GeneratedClaim> = jsonl::read_all(&c.train_claims)?;
            let mut train = Vec::with_capacity(claims.len());
            for claim in &claims {
                let lp = claim.token_logprobs.as_deref().ok_or_else(|| {
                    CliError::Config(format!("training claim {} has no token logprobs", claim.item_id))
                })?;
                train.push((claim_confidence(lp)?, labels[&claim.item_id]));
            }
            DetectorImpl::Confidence(fit_confidence_threshold(&train)?)
        }
        DetectorKind::Lmvlm | DetectorKind::LmvlmMajority => DetectorImpl::Lmvlm {
            examiner: examiner()?,
            examinee,
            catalog,
            config: exam.clone(),
            majority: kind == DetectorKind::LmvlmMajority,
        },
        DetectorKind::AysLmvlm => DetectorImpl::Ensemble {
            examiner: examiner()?,
            examinee,
            catalog,
            opts,
            config: exam.clone(),
        },
    })
}

fn claim_context(claim: &GeneratedClaim, items: Option<&BTreeMap<String, QAItem>>) -> ClaimContext {
    match items.and_then(|m| m.get(&claim.item_id)) {
        Some(item) => ClaimContext::new(item, claim),
        None => ClaimContext {
            item_id: claim.item_id.clone(),
            question: String::new(),
            query_format: QueryFormat::Question,
            claim: claim.text.clone(),
            claim_logprobs: claim.token_logprobs.clone(),
            train_split_ref: None,
        },
    }
}

fn stored_transcripts(
    transcripts: Vec<Transcript>,
    record_id: &str,
    run_id: &str,
    item_id: &str,
    detector: &str,
) -> Vec<StoredTranscript> {
    transcripts
        .into_iter()
        .enumerate()
        .map(|(run_index, transcript)| StoredTranscript {
            schema_version: STORE_SCHEMA_VERSION,
            record_id: record_id.to_string(),
            run_id: run_id.to_string(),
            item_id: item_id.to_string(),
            detector: detector.to_string(),
            run_index,
            transcript,
        })
        .collect()
}

pub fn examine(config: &Config, args: &ExamineArgs) -> Result<ExamineSummary, CliError> {
    let kind = match (args.detector, args.majority) {
        (k, false) => k,
        (DetectorKind::Lmvlm | DetectorKind::LmvlmMajority, true) => DetectorKind::LmvlmMajority,
        (DetectorKind::AysLmvlm, true) => DetectorKind::AysLmvlm,
        (k, true) => return Err(CliError::Usage(format!("--majority does not apply to detector {k}"))),
    };
    let mut exam = config.exam.clone();
    if args.no_followups {
        exam.followups_enabled = false;
    }
    if args.seed.is_some() {
        exam.seed = args.seed;
    }
    exam.validate()?;
    if matches!(kind, DetectorKind::Ays | DetectorKind::Idk | DetectorKind::IcIdk) && args.dataset.is_none() {
        return Err(CliError::Usage(format!("detector {kind} needs --dataset")));
    }

    let claims: Vec<GeneratedClaim> = jsonl::read_all(&args.claims)?;
    let items = match &args.dataset {
        Some(path) => {
            let items = items_by_id(load_items(path)?);
            missing_items(&claims, &items)?;
            Some(items)
        }
        None => None,
    };
    let fallback_dataset = args
        .claims
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let store = TranscriptStore::open(&args.store)?;
    let detector_name = kind.as_str().to_string();
    let completed = store.completed_keys()?;
    let pending: Vec<&GeneratedClaim> = claims
        .iter()
        .filter(|c| !completed.contains(&(detector_name.clone(), c.item_id.clone())))
        .collect();

    let budget = Arc::new(Budget::new(args.max_backend_calls));
    let examinee = config.build_backend(&args.examinee, &budget)?;
    let mut descriptors = vec![config.descriptor(&args.examinee)?];
    let examiner = match (&args.examiner, kind.uses_examiner()) {
        (Some(name), true) => {
            descriptors.push(config.descriptor(name)?);
            Some(config.build_backend(name, &budget)?)
        }
        (None, true) => return Err(CliError::Usage(format!("detector {kind} needs --examiner"))),
        (_, false) => None,
    };
    let detector = build_detector(kind, config, &exam, examiner, examinee, args.seed)?;

    let run_id = Uuid::new_v4().to_string();
    let mut snapshot = config.clone();
    snapshot.exam = exam.clone();
    let mut manifest = RunManifest {
        schema_version: STORE_SCHEMA_VERSION,
        run_id: run_id.clone(),
        command: "examine".into(),
        config: serde_json::to_value(&snapshot).expect("config serializes"),
        backends: descriptors,
        dataset: args.dataset.clone(),
        claims: Some(args.claims.clone()),
        detector: Some(detector_name.clone()),
        seed: exam.seed,
        started_at: Utc::now(),
        finished_at: None,
        counts: RunCounts {
            cached: claims.len() - pending.len(),
            ..RunCounts::default()
        },
        status: RunStatus::Running,
    };
    store.append_manifest(&manifest)?;

    let failures = Mutex::new(Vec::new());
    let completed_now = Mutex::new(0usize);
    run_pool(args.jobs, &pending, |claim| {
        if budget.is_exhausted() {
            return Ok(());
        }
        let ctx = claim_context(claim, items.as_ref());
        let result = detector.detect(&ctx);
        if budget.is_exhausted() {
            return Ok(());
        }
        let record_id = Uuid::new_v4().to_string();
        let dataset = items
            .as_ref()
            .and_then(|m| m.get(&claim.item_id))
            .map_or_else(|| fallback_dataset.clone(), |i| i.dataset.clone());
        let mut record = StoredRecord {
            schema_version: STORE_SCHEMA_VERSION,
            record_id: record_id.clone(),
            run_id: run_id.clone(),
            item_id: claim.item_id.clone(),
            dataset,
            detector: detector_name.clone(),
            verdict: None,
            score: None,
            metadata: BTreeMap::new(),
            aborted: None,
            transcripts: 0,
        };
        let transcripts = match result {
            Ok(outcome) => {
                record.verdict = Some(outcome.verdict);
                record.score = outcome.score;
                record.metadata = outcome.metadata;
                *completed_now.lock().unwrap() += 1;
                outcome.transcripts
            }
            Err(e) => {
                failures.lock().unwrap().push(ItemFailure {
                    item_id: claim.item_id.clone(),
                    error: e.to_string(),
                });
                record.aborted = Some(e.to_string());
                match e {
                    DetectorError::Exam(ExamError::Aborted { transcript, .. }) => vec![*transcript],
                    _ => Vec::new(),
                }
            }
        };
        record.transcripts = transcripts.len();
        let stored = stored_transcripts(transcripts, &record_id, &run_id, &claim.item_id, &detector_name);
        store.commit(&stored, &record)?;
        Ok(())
    })?;

    let mut failures = failures.into_inner().unwrap();
    failures.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    manifest.counts.completed = completed_now.into_inner().unwrap();
    manifest.counts.aborted = failures.len();
    manifest.finished_at = Some(Utc::now());
    manifest.status = if budget.is_exhausted() {
        RunStatus::BudgetExhausted
    } else {
        RunStatus::Finished
    };
    store.append_manifest(&manifest)?;
    Ok(ExamineSummary {
        run_id,
        detector: detector_name,
        counts: manifest.counts,
        failures,
        budget_exhausted: budget.is_exhausted(),
        backend_calls: budget.used(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub item_id: String,
    pub label: GoldLabel,
}

fn committed_records(store: &TranscriptStore, detector: Option<&str>) -> Result<Vec<StoredRecord>, CliError> {
    Ok(store
        .committed()?
        .into_iter()
        .filter(|r| detector.is_none_or(|d| r.detector == d))
        .collect())
}

/// Stats per detector over the transcripts of committed records.
fn exam_stats_by_detector(
    store: &TranscriptStore,
    records: &[StoredRecord],
) -> Result<Vec<LabeledExamStats<f64>>, CliError> {
    let mut by_detector: BTreeMap<String, Vec<Transcript>> = BTreeMap::new();
    for t in store.transcripts_for(records)? {
        by_detector.entry(t.detector).or_default().push(t.transcript);
    }
    by_detector
        .into_iter()
        .map(|(label, ts)| {
            Ok(LabeledExamStats {
                label,
                stats: compute_exam_stats(&ts)?,
            })
        })
        .collect()
}

pub fn evaluate(args: &EvaluateArgs) -> Result<Report, CliError> {
    let mut labels = match (&args.labels, &args.claims, &args.dataset) {
        (Some(path), _, _) => jsonl::read_all::<LabelEntry>(path)?
            .into_iter()
            .map(|e| (e.item_id, e.label))
            .collect(),
        (None, Some(claims), Some(dataset)) => auto_labels(claims, dataset)?,
        _ => return Err(CliError::Usage("evaluate needs --labels, or --claims with --dataset".into())),
    };
    if let Some(path) = &args.overrides {
        labels = apply_overrides(labels, &jsonl::read_all::<OverrideEntry>(path)?)?;
    }
    let falsehood_set = match &args.claims {
        Some(path) => {
            let claims: Vec<GeneratedClaim> = jsonl::read_all(path)?;
            !claims.is_empty() && claims.iter().all(|c| c.mode == ClaimMode::Falsehood)
        }
        None => false,
    };

    let store = TranscriptStore::open(&args.store)?;
    let records = committed_records(&store, args.detector.as_deref())?;
    let unlabeled: Vec<String> = records
        .iter()
        .filter(|r| !labels.contains_key(&r.item_id))
        .map(|r| format!("{}/{}", r.detector, r.item_id))
        .collect();
    if !unlabeled.is_empty() {
        return Err(CliError::Unlabeled(unlabeled));
    }

    let mut groups: BTreeMap<(String, String), Vec<EvalRecord>> = BTreeMap::new();
    for r in &records {
        let gold = labels[&r.item_id];
        if gold == GoldLabel::Excluded {
            continue;
        }
        groups
            .entry((r.detector.clone(), r.dataset.clone()))
            .or_default()
            .push(EvalRecord {
                item_id: r.item_id.clone(),
                gold,
                verdict: r.verdict.expect("committed records have verdicts"),
                detector: r.detector.clone(),
                dataset: r.dataset.clone(),
            });
    }
    let mut report = Report::default();
    for ((detector, dataset), recs) in &groups {
        report.metrics.push(metrics_report(detector, dataset, recs)?);
        if falsehood_set {
            report.falsehood.push(FalsehoodResult {
                detector: detector.clone(),
                dataset: dataset.clone(),
                n: recs.len(),
                accuracy: falsehood_accuracy(recs)?,
            });
        }
    }
    report.exam_stats = exam_stats_by_detector(&store, &records)?;
    Ok(report)
}

pub fn stats(args: &StatsArgs) -> Result<Report, CliError> {
    let store = TranscriptStore::open(&args.store)?;
    let records = committed_records(&store, args.detector.as_deref())?;
    Ok(Report {
        exam_stats: exam_stats_by_detector(&store, &records)?,
        ..Report::default()
    })
}

pub fn replay(args: &ReplayArgs) -> Result<String, CliError> {
    let store = TranscriptStore::open(&args.store)?;
    let records: Vec<StoredRecord> = committed_records(&store, args.detector.as_deref())?
        .into_iter()
        .filter(|r| r.item_id == args.item)
        .collect();
    let ids: BTreeSet<&str> = records.iter().map(|r| r.record_id.as_str()).collect();
    let mut transcripts: Vec<StoredTranscript> = store
        .transcripts_of_item(&args.item)?
        .into_iter()
        .filter(|t| ids.contains(t.record_id.as_str()))
        .collect();
    if transcripts.is_empty() {
        return Err(CliError::NotFound(format!("no stored transcript for item `{}`", args.item)));
    }
    transcripts.sort_by(|a, b| (&a.detector, a.run_index).cmp(&(&b.detector, b.run_index)));
    let blocks: Vec<String> = transcripts
        .iter()
        .map(|t| {
            format!(
                "== {} / {} / run {} ==\n\n{}",
                t.detector,
                t.item_id,
                t.run_index,
                t.transcript.render_dialogue()
            )
        })
        .collect();
    Ok(blocks.join("\n\n"))
}
