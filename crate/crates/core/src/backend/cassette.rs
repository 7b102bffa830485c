//! Record/replay cassettes.
//!
//! A cassette is a JSON Lines file with one [`CassetteEntry`] per call.
//! Appends go through a single mutex-guarded writer, one whole line per
//! `write_all`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Backend, BackendDescriptor, BackendError, CompletionRequest, CompletionResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request_hash: String,
    pub request: CompletionRequest,
    pub response: CompletionResponse,
    pub recorded_at: DateTime<Utc>,
}

pub fn read_cassette(path: &Path) -> Result<Vec<CassetteEntry>, BackendError> {
    let file = File::open(path)?;
    let mut entries = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line)?);
    }
    Ok(entries)
}

struct CassetteWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl CassetteWriter {
    fn open(path: &Path) -> Result<Self, BackendError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    fn append(
        &self,
        hash: String,
        request: &CompletionRequest,
        response: &CompletionResponse,
    ) -> Result<(), BackendError> {
        let entry = CassetteEntry {
            request_hash: hash,
            request: request.clone(),
            response: response.clone(),
            recorded_at: Utc::now(),
        };
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        let mut file = self.file.lock().unwrap();
        file.write_all(line.as_bytes())?;
        file.flush()?;
        Ok(())
    }
}

/// Pass-through wrapper that appends every call to a cassette.
pub struct RecordingBackend<B> {
    inner: B,
    writer: CassetteWriter,
}

/// Wraps `inner` so each successful call is appended to `cassette`.
pub fn record_wrap<B: Backend>(inner: B, cassette: &Path) -> Result<RecordingBackend<B>, BackendError> {
    Ok(RecordingBackend {
        inner,
        writer: CassetteWriter::open(cassette)?,
    })
}

impl<B> RecordingBackend<B> {
    pub fn cassette_path(&self) -> &Path {
        &self.writer.path
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let response = self.inner.complete(request)?;
        let hash = request.hash_for(&self.inner.descriptor().id);
        self.writer.append(hash, request, &response)?;
        Ok(response)
    }
}

/// Responses grouped by request hash; repeated identical requests walk the
/// recorded responses in order.
#[derive(Default)]
struct Tape {
    by_hash: HashMap<String, (Vec<CompletionResponse>, usize)>,
}

impl Tape {
    fn from_entries(entries: Vec<CassetteEntry>) -> Self {
        let mut tape = Tape::default();
        for e in entries {
            tape.push(e.request_hash, e.response);
        }
        tape
    }

    fn push(&mut self, hash: String, response: CompletionResponse) {
        self.by_hash.entry(hash).or_default().0.push(response);
    }

    /// Next unplayed response for `hash`.
    fn next_fresh(&mut self, hash: &str) -> Option<CompletionResponse> {
        let (responses, cursor) = self.by_hash.get_mut(hash)?;
        let r = responses.get(*cursor)?.clone();
        *cursor += 1;
        Some(r)
    }

    /// Like `next_fresh`, but keeps returning the last response once the
    /// recorded ones are used up.
    fn next_clamped(&mut self, hash: &str) -> Option<CompletionResponse> {
        let (responses, cursor) = self.by_hash.get_mut(hash)?;
        let i = (*cursor).min(responses.len().checked_sub(1)?);
        *cursor += 1;
        Some(responses[i].clone())
    }

    fn len(&self) -> usize {
        self.by_hash.values().map(|(v, _)| v.len()).sum()
    }
}

/// Serves responses from a cassette without touching any model.
///
/// The descriptor id must match the id the cassette was recorded under,
/// since it is part of the request hash.
pub struct ReplayBackend {
    descriptor: BackendDescriptor,
    tape: Mutex<Tape>,
}

impl ReplayBackend {
    pub fn open(path: &Path, descriptor: BackendDescriptor) -> Result<Self, BackendError> {
        Ok(Self::from_entries(read_cassette(path)?, descriptor))
    }

    pub fn from_entries(entries: Vec<CassetteEntry>, descriptor: BackendDescriptor) -> Self {
        Self {
            descriptor,
            tape: Mutex::new(Tape::from_entries(entries)),
        }
    }

    pub fn len(&self) -> usize {
        self.tape.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Backend for ReplayBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let hash = request.hash_for(&self.descriptor.id);
        self.tape
            .lock()
            .unwrap()
            .next_clamped(&hash)
            .ok_or(BackendError::CassetteMiss(hash))
    }
}

/// Replays recorded responses and records the rest: a second identical run
/// issues no calls to the inner backend.
pub struct CacheBackend<B> {
    inner: B,
    tape: Mutex<Tape>,
    writer: CassetteWriter,
}

impl<B: Backend> CacheBackend<B> {
    pub fn open(inner: B, cassette: &Path) -> Result<Self, BackendError> {
        let entries = if cassette.exists() {
            read_cassette(cassette)?
        } else {
            Vec::new()
        };
        Ok(Self {
            inner,
            tape: Mutex::new(Tape::from_entries(entries)),
            writer: CassetteWriter::open(cassette)?,
        })
    }
}

impl<B: Backend> Backend for CacheBackend<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn generate(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let hash = request.hash_for(&self.inner.descriptor().id);
        if let Some(hit) = self.tape.lock().unwrap().next_fresh(&hash) {
            return Ok(hit);
        }
        let response = self.inner.complete(request)?;
        self.writer.append(hash, request, &response)?;
        Ok(response)
    }
}
