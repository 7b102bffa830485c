//! Append-only store of detector records, transcripts and run manifests.
//!
//! A store is a directory holding three JSON Lines files. Every append is a
//! whole line; a line cut short by a crash is dropped when the store is next
//! opened. A claim's transcripts are written before its record, and readers
//! only trust transcripts whose record made it to disk, so an interrupted
//! claim leaves nothing visible and is redone on resume.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use crossexam::{BackendDescriptor, Transcript, Verdict};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const STORE_SCHEMA_VERSION: u32 = 1;

pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const RUNS_FILE: &str = "runs.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("store {path} at byte {offset}: {source}")]
    Parse {
        path: PathBuf,
        offset: u64,
        #[source]
        source: serde_json::Error,
    },
    #[error("store {path} has schema version {found}, expected {STORE_SCHEMA_VERSION}")]
    Schema { path: PathBuf, found: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTranscript {
    pub schema_version: u32,
    pub record_id: String,
    pub run_id: String,
    pub item_id: String,
    pub detector: String,
    /// Position within a majority vote; 0 for single runs.
    pub run_index: usize,
    pub transcript: Transcript,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub schema_version: u32,
    pub record_id: String,
    pub run_id: String,
    pub item_id: String,
    pub dataset: String,
    pub detector: String,
    /// Absent when the claim was aborted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
    pub transcripts: usize,
}

impl StoredRecord {
    pub fn is_aborted(&self) -> bool {
        self.aborted.is_some() || self.verdict.is_none()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub completed: usize,
    pub aborted: usize,
    /// Items skipped because an earlier run already finished them.
    pub cached: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Finished,
    BudgetExhausted,
}

/// One line per run start and one per run end; the later line wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub command: String,
    pub config: serde_json::Value,
    pub backends: Vec<BackendDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claims: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub started_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    pub counts: RunCounts,
    pub status: RunStatus,
}

/// Drops a trailing partial line left by an interrupted append. Returns
/// whether anything was removed.
pub fn repair_trailing_line(path: &Path) -> Result<bool, StoreError> {
    let mut file = match OpenOptions::new().read(true).write(true).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(false),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err(path))?;
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(false);
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    file.set_len(keep as u64).map_err(io_err(path))?;
    Ok(true)
}

/// Appends pre-serialized lines with a single write.
fn append_lines(path: &Path, lines: &str) -> Result<(), StoreError> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    file.write_all(lines.as_bytes()).map_err(io_err(path))
}

fn to_line<T: Serialize>(value: &T) -> String {
    let mut line = serde_json::to_string(value).expect("store types serialize");
    line.push('\n');
    line
}

/// Reads every line with its byte offset.
fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(u64, T)>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut offset = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        if !line.trim().is_empty() {
            let value = serde_json::from_str(&line).map_err(|source| StoreError::Parse {
                path: path.to_path_buf(),
                offset,
                source,
            })?;
            out.push((offset, value));
        }
        offset += n as u64;
    }
    Ok(out)
}

#[derive(Deserialize)]
struct Versioned {
    schema_version: u32,
}

fn check_schema(path: &Path) -> Result<(), StoreError> {
    for (_, v) in read_lines::<Versioned>(path)? {
        if v.schema_version != STORE_SCHEMA_VERSION {
            return Err(StoreError::Schema {
                path: path.to_path_buf(),
                found: v.schema_version,
            });
        }
    }
    Ok(())
}

struct Writer {
    transcripts_len: u64,
    index: BTreeMap<String, Vec<u64>>,
}

pub struct TranscriptStore {
    dir: PathBuf,
    writer: Mutex<Writer>,
}

impl TranscriptStore {
    /// Opens or creates the store at `dir`, repairing torn trailing lines.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for name in [TRANSCRIPTS_FILE, RECORDS_FILE, RUNS_FILE] {
            let path = dir.join(name);
            repair_trailing_line(&path)?;
            check_schema(&path)?;
        }
        let transcripts = dir.join(TRANSCRIPTS_FILE);
        let mut index: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for (offset, t) in read_lines::<StoredTranscript>(&transcripts)? {
            index.entry(t.item_id).or_default().push(offset);
        }
        let transcripts_len = std::fs::metadata(&transcripts).map(|m| m.len()).unwrap_or(0);
        Ok(Self {
            dir: dir.to_path_buf(),
            writer: Mutex::new(Writer {
                transcripts_len,
                index,
            }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Item id to byte offsets of its transcripts.
    pub fn index(&self) -> BTreeMap<String, Vec<u64>> {
        self.writer.lock().unwrap().index.clone()
    }

    /// Writes a claim's transcripts, then its record.
    pub fn commit(&self, transcripts: &[StoredTranscript], record: &StoredRecord) -> Result<(), StoreError> {
        let mut w = self.writer.lock().unwrap();
        if !transcripts.is_empty() {
            let mut buf = String::new();
            let mut offsets = Vec::with_capacity(transcripts.len());
            for t in transcripts {
                offsets.push((t.item_id.clone(), w.transcripts_len + buf.len() as u64));
                buf.push_str(&to_line(t));
            }
            append_lines(&self.path(TRANSCRIPTS_FILE), &buf)?;
            w.transcripts_len += buf.len() as u64;
            for (item, offset) in offsets {
                w.index.entry(item).or_default().push(offset);
            }
        }
        append_lines(&self.path(RECORDS_FILE), &to_line(record))
    }

    pub fn append_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        let _w = self.writer.lock().unwrap();
        append_lines(&self.path(RUNS_FILE), &to_line(manifest))
    }

    pub fn records(&self) -> Result<Vec<StoredRecord>, StoreError> {
        Ok(read_lines(&self.path(RECORDS_FILE))?.into_iter().map(|(_, r)| r).collect())
    }

    /// Latest manifest line per run, in start order.
    pub fn manifests(&self) -> Result<Vec<RunManifest>, StoreError> {
        let mut order = Vec::new();
        let mut latest: BTreeMap<String, RunManifest> = BTreeMap::new();
        for (_, m) in read_lines::<RunManifest>(&self.path(RUNS_FILE))? {
            if !latest.contains_key(&m.run_id) {
                order.push(m.run_id.clone());
            }
            latest.insert(m.run_id.clone(), m);
        }
        Ok(order.into_iter().filter_map(|id| latest.remove(&id)).collect())
    }

    /// The latest non-aborted record per (detector, item), sorted by
    /// detector then item id.
    pub fn committed(&self) -> Result<Vec<StoredRecord>, StoreError> {
        let mut latest: BTreeMap<(String, String), StoredRecord> = BTreeMap::new();
        for r in self.records()? {
            if !r.is_aborted() {
                latest.insert((r.detector.clone(), r.item_id.clone()), r);
            }
        }
        Ok(latest.into_values().collect())
    }

    /// (detector, item) pairs that already have a usable record.
    pub fn completed_keys(&self) -> Result<BTreeSet<(String, String)>, StoreError> {
        Ok(self
            .committed()?
            .into_iter()
            .map(|r| (r.detector, r.item_id))
            .collect())
    }

    /// Transcripts belonging to the given records, in record order then run
    /// index.
    pub fn transcripts_for(&self, records: &[StoredRecord]) -> Result<Vec<StoredTranscript>, StoreError> {
        let wanted: BTreeMap<&str, usize> = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.record_id.as_str(), i))
            .collect();
        let mut out: Vec<(usize, StoredTranscript)> = read_lines::<StoredTranscript>(&self.path(TRANSCRIPTS_FILE))?
            .into_iter()
            .filter_map(|(_, t)| wanted.get(t.record_id.as_str()).map(|&i| (i, t)))
            .collect();
        out.sort_by_key(|(i, t)| (*i, t.run_index));
        Ok(out.into_iter().map(|(_, t)| t).collect())
    }

    /// Every transcript stored for `item_id`, read through the offset index.
    pub fn transcripts_of_item(&self, item_id: &str) -> Result<Vec<StoredTranscript>, StoreError> {
        let offsets = self.index().remove(item_id).unwrap_or_default();
        let path = self.path(TRANSCRIPTS_FILE);
        let mut out = Vec::with_capacity(offsets.len());
        if offsets.is_empty() {
            return Ok(out);
        }
        let mut reader = BufReader::new(File::open(&path).map_err(io_err(&path))?);
        for offset in offsets {
            reader.seek(SeekFrom::Start(offset)).map_err(io_err(&path))?;
            let mut line = String::new();
            reader.read_line(&mut line).map_err(io_err(&path))?;
            out.push(serde_json::from_str(&line).map_err(|source| StoreError::Parse {
                path: path.clone(),
                offset,
                source,
            })?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crossexam::exam::Counters;
    use crossexam::RawDecision;

    fn transcript(claim: &str) -> Transcript {
        Transcript {
            claim: claim.into(),
            turns: vec![],
            decision: RawDecision {
                verdict: Verdict::Accept,
                inconclusive: false,
                source_text: "correct".into(),
            },
            counters: Counters::default(),
            cap_hit: false,
            run_seed: None,
            aborted: None,
        }
    }

    fn stored(record_id: &str, item: &str) -> StoredTranscript {
        StoredTranscript {
            schema_version: STORE_SCHEMA_VERSION,
            record_id: record_id.into(),
            run_id: "r".into(),
            item_id: item.into(),
            detector: "lmvlm".into(),
            run_index: 0,
            transcript: transcript(item),
        }
    }

    fn record(record_id: &str, item: &str, verdict: Option<Verdict>) -> StoredRecord {
        StoredRecord {
            schema_version: STORE_SCHEMA_VERSION,
            record_id: record_id.into(),
            run_id: "r".into(),
            item_id: item.into(),
            dataset: "d".into(),
            detector: "lmvlm".into(),
            verdict,
            score: None,
            metadata: BTreeMap::new(),
            aborted: verdict.is_none().then(|| "boom".to_string()),
            transcripts: 1,
        }
    }

    #[test]
    fn index_points_at_transcripts() {
        let dir = tempfile::tempdir().unwrap();
        let store = TranscriptStore::open(dir.path()).unwrap();
        store.commit(&[stored("a", "x")], &record("a", "x", Some(Verdict::Accept))).unwrap();
        store.commit(&[stored("b", "y")], &record("b", "y", Some(Verdict::Reject))).unwrap();
        let got = store.transcripts_of_item("y").unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].transcript.claim, "y");

        let reopened = TranscriptStore::open(dir.path()).unwrap();
        assert_eq!(reopened.index(), store.index());
    }

    #[test]
    fn aborted_records_are_not_committed() {
        let dir = tempfile::tempdir().unwrap();
        let store = TranscriptStore::open(dir.path()).unwrap();
        store.commit(&[], &record("a", "x", None)).unwrap();
        assert!(store.committed().unwrap().is_empty());
        store.commit(&[stored("b", "x")], &record("b", "x", Some(Verdict::Reject))).unwrap();
        let c = store.committed().unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(store.transcripts_for(&c).unwrap().len(), 1);
    }

    #[test]
    fn torn_line_is_dropped_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let store = TranscriptStore::open(dir.path()).unwrap();
        store.commit(&[stored("a", "x")], &record("a", "x", Some(Verdict::Accept))).unwrap();
        drop(store);
        let records = dir.path().join(RECORDS_FILE);
        let mut f = OpenOptions::new().append(true).open(&records).unwrap();
        f.write_all(br#"{"schema_version":1,"record_id":"b","#).unwrap();
        let store = TranscriptStore::open(dir.path()).unwrap();
        assert_eq!(store.records().unwrap().len(), 1);
        assert!(std::fs::read_to_string(&records).unwrap().ends_with('\n'));
    }

    #[test]
    fn orphan_transcripts_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        append_lines(&dir.path().join(TRANSCRIPTS_FILE), &to_line(&stored("orphan", "x"))).unwrap();
        let store = TranscriptStore::open(dir.path()).unwrap();
        store.commit(&[stored("a", "x")], &record("a", "x", Some(Verdict::Accept))).unwrap();
        let c = store.committed().unwrap();
        let ts = store.transcripts_for(&c).unwrap();
        assert_eq!(ts.len(), 1);
        assert_eq!(ts[0].record_id, "a");
    }
}
