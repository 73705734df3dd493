//! File-backed session store.
//!
//! ```text
//! <root>/artifacts/<sha256>.png        shared, content-addressed images
//! <root>/sessions/<id>/session.json    metadata and status
//! <root>/sessions/<id>/history.jsonl   refinement requests, append-only
//! <root>/sessions/<id>/explanation.json  full-precision explanation state
//! ```
//!
//! Each session sits behind its own mutex, so requests on one session are
//! serialized while different sessions proceed independently.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, SecondsFormat, Utc};
use exemplar_core::explainer::{ArtifactStore, Explanation, ExplanationRecord, Status};
use exemplar_core::image::Image;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{Result, ServiceError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Pending,
    Ready,
    Degenerate,
    Failed,
}

impl SessionStatus {
    pub fn is_done(self) -> bool {
        matches!(self, SessionStatus::Ready | SessionStatus::Degenerate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub name: String,
    pub classifier_id: String,
    pub aae_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinementKind {
    Exemplars,
    Counterexemplars,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub index: usize,
    pub at: String,
    pub kind: RefinementKind,
    pub count: usize,
    pub target_class: Option<String>,
    pub seed: u64,
    pub added: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub status: SessionStatus,
    pub created_at: String,
    pub seed: u64,
    pub input: String,
    pub model: ModelRef,
    #[serde(skip)]
    pub history: Vec<HistoryEntry>,
    pub error: Option<String>,
}

/// Body of `GET /explanations/{id}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub status: SessionStatus,
    pub created_at: String,
    pub seed: u64,
    pub input: String,
    pub model: ModelRef,
    pub history: Vec<HistoryEntry>,
    pub error: Option<String>,
    pub explanation: Option<ExplanationRecord>,
}

pub struct SessionState {
    pub session: Session,
    pub explanation: Option<Explanation>,
    record: Option<ExplanationRecord>,
}

impl SessionState {
    pub fn record(&self) -> Option<&ExplanationRecord> {
        self.record.as_ref()
    }

    pub fn view(&self) -> SessionView {
        let s = &self.session;
        SessionView {
            session_id: s.session_id.clone(),
            status: s.status,
            created_at: s.created_at.clone(),
            seed: s.seed,
            input: s.input.clone(),
            model: s.model.clone(),
            history: s.history.clone(),
            error: s.error.clone(),
            explanation: self.record.clone(),
        }
    }
}

pub type SessionHandle = Arc<Mutex<SessionState>>;

pub struct SessionStore {
    root: PathBuf,
    live: Mutex<HashMap<String, SessionHandle>>,
}

pub fn now() -> String {
    let t: DateTime<Utc> = Utc::now();
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

impl SessionStore {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("artifacts"))?;
        fs::create_dir_all(root.join("sessions"))?;
        Ok(Self { root: root.to_path_buf(), live: Mutex::new(HashMap::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn put_artifacts(&self, store: &ArtifactStore) -> Result<()> {
        store.write_to(&self.root)?;
        Ok(())
    }

    /// PNG bytes for `artifacts/<name>`; `None` for unknown or malformed names.
    pub fn artifact(&self, name: &str) -> Result<Option<Vec<u8>>> {
        let Some(hash) = name.strip_suffix(".png") else {
            return Ok(None);
        };
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
            return Ok(None);
        }
        match fs::read(self.root.join("artifacts").join(name)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// New pending session for `input`.
    pub fn create(&self, input: &Image, seed: u64, model: ModelRef) -> Result<(String, SessionHandle)> {
        let mut artifacts = ArtifactStore::default();
        let input_ref = artifacts.put_image(input)?;
        self.put_artifacts(&artifacts)?;
        let id = Uuid::new_v4().simple().to_string();
        let session = Session {
            session_id: id.clone(),
            status: SessionStatus::Pending,
            created_at: now(),
            seed,
            input: input_ref,
            model,
            history: Vec::new(),
            error: None,
        };
        fs::create_dir_all(self.session_dir(&id))?;
        let state = SessionState { session, explanation: None, record: None };
        self.persist_meta(&state.session)?;
        let handle = Arc::new(Mutex::new(state));
        self.live.lock().expect("store lock").insert(id.clone(), handle.clone());
        Ok((id, handle))
    }

    /// Live session, or one reloaded from disk.
    pub fn get(&self, id: &str) -> Result<Option<SessionHandle>> {
        if Uuid::try_parse(id).is_err() {
            return Ok(None);
        }
        if let Some(h) = self.live.lock().expect("store lock").get(id) {
            return Ok(Some(h.clone()));
        }
        let dir = self.session_dir(id);
        if !dir.join("session.json").is_file() {
            return Ok(None);
        }
        let state = self.load(&dir)?;
        let mut live = self.live.lock().expect("store lock");
        Ok(Some(live.entry(id.to_string()).or_insert_with(|| Arc::new(Mutex::new(state))).clone()))
    }

    fn load(&self, dir: &Path) -> Result<SessionState> {
        let mut session: Session = serde_json::from_slice(&fs::read(dir.join("session.json"))?)?;
        if let Ok(text) = fs::read_to_string(dir.join("history.jsonl")) {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                session.history.push(serde_json::from_str(line)?);
            }
        }
        let explanation: Option<Explanation> = match fs::read(dir.join("explanation.json")) {
            Ok(b) => Some(serde_json::from_slice(&b)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        if session.status == SessionStatus::Pending {
            // The computation died with the previous process.
            session.status = SessionStatus::Failed;
            session.error = Some("interrupted before the explanation finished".into());
            self.persist_meta(&session)?;
        }
        let mut state = SessionState { session, explanation, record: None };
        self.refresh_record(&mut state)?;
        Ok(state)
    }

    fn persist_meta(&self, s: &Session) -> Result<()> {
        write_atomic(&self.session_dir(&s.session_id).join("session.json"), &serde_json::to_vec_pretty(s)?)
    }

    fn persist_explanation(&self, state: &SessionState) -> Result<()> {
        if let Some(e) = &state.explanation {
            let path = self.session_dir(&state.session.session_id).join("explanation.json");
            write_atomic(&path, &serde_json::to_vec(e)?)?;
        }
        Ok(())
    }

    fn refresh_record(&self, state: &mut SessionState) -> Result<()> {
        state.record = match &state.explanation {
            Some(e) => {
                let mut artifacts = ArtifactStore::default();
                let record = e.to_record(&mut artifacts)?;
                self.put_artifacts(&artifacts)?;
                Some(record)
            }
            None => None,
        };
        Ok(())
    }

    /// Stores the outcome of the initial computation.
    pub fn complete(&self, state: &mut SessionState, outcome: std::result::Result<Explanation, String>) -> Result<()> {
        match outcome {
            Ok(e) => {
                state.session.status = match e.status {
                    Status::Ready => SessionStatus::Ready,
                    Status::Degenerate => SessionStatus::Degenerate,
                };
                state.explanation = Some(e);
                self.persist_explanation(state)?;
                self.refresh_record(state)?;
            }
            Err(msg) => {
                state.session.status = SessionStatus::Failed;
                state.session.error = Some(msg);
            }
        }
        self.persist_meta(&state.session)
    }

    /// Appends an accepted refinement to the history and saves the grown
    /// explanation.
    pub fn record_refinement(&self, state: &mut SessionState, mut entry: HistoryEntry) -> Result<HistoryEntry> {
        entry.index = state.session.history.len();
        let path = self.session_dir(&state.session.session_id).join("history.jsonl");
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        f.write_all(&line)?;
        f.sync_data()?;
        state.session.history.push(entry.clone());
        self.persist_explanation(state)?;
        self.refresh_record(state)?;
        Ok(entry)
    }
}

impl From<std::sync::PoisonError<std::sync::MutexGuard<'_, SessionState>>> for ServiceError {
    fn from(_: std::sync::PoisonError<std::sync::MutexGuard<'_, SessionState>>) -> Self {
        ServiceError::Other("session lock poisoned".into())
    }
}
