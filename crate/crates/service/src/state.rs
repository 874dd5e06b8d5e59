//! Sessions, jobs and the durable session directory.
//!
//! Each session sits behind its own mutex, which doubles as its command
//! queue. A mutation is acknowledged only after the session document has been
//! written to `<data>/<session_id>/session.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use ladder_core::codegen::Generator;
use ladder_core::executor::RunnerConfig;
use ladder_core::fsutil::write_atomic;
use ladder_core::gen_cache::GenCache;
use ladder_core::llm_gateway::{Gateway, LlmBackend, TemplateStore};
use ladder_core::session::Session;
use ladder_core::{session_doc, PromptTree};
use serde::Serialize;
use serde_json::Value;
use tokio::sync::watch;

use crate::error::{ApiError, ApiResult, ErrorBody};

/// How new sessions get their generator and runner.
#[derive(Clone)]
pub struct Engine {
    pub backend: Arc<dyn LlmBackend>,
    pub templates: TemplateStore,
    pub cache: bool,
    pub runner: RunnerConfig,
}

impl Engine {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Engine {
            backend,
            templates: TemplateStore::builtin(),
            cache: false,
            runner: RunnerConfig::default(),
        }
    }

    fn generator(&self, dir: &Path) -> Generator {
        let mut gw = Gateway::new(self.backend.clone()).with_templates(self.templates.clone());
        if self.cache {
            gw = gw.with_cache(GenCache::load_or_default(&dir.join(CACHE_FILE)));
        }
        Generator::new(gw)
    }
}

pub const SESSION_FILE: &str = "session.json";
pub const CACHE_FILE: &str = "cache.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub version: u64,
    pub doc_version: u64,
}

pub struct SessionSlot {
    pub id: String,
    pub dir: PathBuf,
    session: Mutex<Session>,
}

impl SessionSlot {
    pub fn lock(&self) -> MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn handle(&self, s: &Session) -> SessionHandle {
        SessionHandle {
            session_id: self.id.clone(),
            version: s.version(),
            doc_version: s.document().doc_version,
        }
    }

    /// Durably records `s`; called before any mutation is acknowledged.
    pub fn persist(&self, s: &Session) -> ApiResult<()> {
        write_atomic(&self.dir.join(SESSION_FILE), s.session_json().as_bytes())?;
        if let Some(cache) = s.generator().gateway().cache_snapshot() {
            cache.save(&self.dir.join(CACHE_FILE))?;
        }
        Ok(())
    }
}

pub fn check_version(s: &Session, expected: u64) -> ApiResult<()> {
    if s.version() != expected {
        return Err(ApiError::Conflict {
            expected,
            actual: s.version(),
        });
    }
    Ok(())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct JobEvent {
    pub seq: usize,
    #[serde(rename = "type")]
    pub kind: String,
    pub data: Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct JobSnapshot {
    pub job_id: String,
    pub session_id: String,
    pub op: String,
    pub status: JobStatus,
    pub result: Option<Value>,
    pub error: Option<ErrorBody>,
    pub events: usize,
}

struct JobState {
    status: JobStatus,
    result: Option<Value>,
    error: Option<ErrorBody>,
    events: Vec<JobEvent>,
}

pub struct Job {
    pub id: String,
    pub session_id: String,
    pub op: String,
    pub cancel: AtomicBool,
    state: Mutex<JobState>,
    tick: watch::Sender<usize>,
}

impl Job {
    fn new(id: String, session_id: String, op: &str) -> Self {
        Job {
            id,
            session_id,
            op: op.into(),
            cancel: AtomicBool::new(false),
            state: Mutex::new(JobState {
                status: JobStatus::Running,
                result: None,
                error: None,
                events: Vec::new(),
            }),
            tick: watch::channel(0).0,
        }
    }

    fn state(&self) -> MutexGuard<'_, JobState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn push(st: &mut JobState, kind: &str, data: Value) -> usize {
        let seq = st.events.len();
        st.events.push(JobEvent {
            seq,
            kind: kind.into(),
            data,
        });
        st.events.len()
    }

    pub fn emit(&self, kind: &str, data: Value) {
        let n = Self::push(&mut self.state(), kind, data);
        self.tick.send_replace(n);
    }

    /// Records the outcome and the closing event in one step, so a reader
    /// that sees the job ended has also seen its last event.
    pub fn finish(&self, outcome: ApiResult<Value>) {
        let n = {
            let mut st = self.state();
            match outcome {
                Ok(v) => {
                    st.result = Some(v.clone());
                    st.status = JobStatus::Succeeded;
                    Self::push(&mut st, "finished", v)
                }
                Err(e) => {
                    let body = e.body();
                    st.error = Some(body.clone());
                    st.status = JobStatus::Failed;
                    Self::push(&mut st, "failed", serde_json::to_value(body).expect("error body serializes"))
                }
            }
        };
        self.tick.send_replace(n);
    }

    pub fn snapshot(&self) -> JobSnapshot {
        let st = self.state();
        JobSnapshot {
            job_id: self.id.clone(),
            session_id: self.session_id.clone(),
            op: self.op.clone(),
            status: st.status,
            result: st.result.clone(),
            error: st.error.clone(),
            events: st.events.len(),
        }
    }

    /// Events from `from` on, and whether the job has ended.
    pub fn events_from(&self, from: usize) -> (Vec<JobEvent>, bool) {
        let st = self.state();
        (st.events[from.min(st.events.len())..].to_vec(), st.status != JobStatus::Running)
    }

    pub fn subscribe(&self) -> watch::Receiver<usize> {
        self.tick.subscribe()
    }
}

pub struct AppState {
    pub engine: Engine,
    pub data_dir: PathBuf,
    sessions: RwLock<BTreeMap<String, Arc<SessionSlot>>>,
    jobs: RwLock<BTreeMap<String, Arc<Job>>>,
    next_job: AtomicU64,
    next_session: AtomicU64,
}

impl AppState {
    /// Opens `data_dir`, reloading every session stored there.
    pub fn open(engine: Engine, data_dir: PathBuf) -> ApiResult<Self> {
        std::fs::create_dir_all(&data_dir).map_err(ladder_core::LadderError::from)?;
        let state = AppState {
            engine,
            data_dir,
            sessions: RwLock::new(BTreeMap::new()),
            jobs: RwLock::new(BTreeMap::new()),
            next_job: AtomicU64::new(1),
            next_session: AtomicU64::new(1),
        };
        let entries = std::fs::read_dir(&state.data_dir).map_err(ladder_core::LadderError::from)?;
        for e in entries.flatten() {
            let file = e.path().join(SESSION_FILE);
            if !file.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&file).map_err(ladder_core::LadderError::from)?;
            let tree = session_doc::deserialize(&text)?;
            state.insert(tree)?;
        }
        Ok(state)
    }

    fn insert(&self, tree: PromptTree) -> ApiResult<Arc<SessionSlot>> {
        let id = tree.session_id().to_string();
        let dir = self.data_dir.join(&id);
        let session = Session::new(tree, self.engine.generator(&dir))?.with_runner(self.engine.runner.clone());
        let slot = Arc::new(SessionSlot {
            id: id.clone(),
            dir,
            session: Mutex::new(session),
        });
        let mut map = self.sessions.write().unwrap_or_else(|p| p.into_inner());
        if map.contains_key(&id) {
            return Err(ApiError::SessionExists(id));
        }
        map.insert(id, slot.clone());
        Ok(slot)
    }

    pub fn create_session(&self, id: Option<String>) -> ApiResult<Arc<SessionSlot>> {
        let id = match id {
            Some(id) => {
                let ok = !id.is_empty()
                    && id.len() <= 64
                    && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
                if !ok {
                    return Err(ApiError::BadRequest(
                        "session ids are 1-64 ASCII letters, digits, `-` or `_`".into(),
                    ));
                }
                id
            }
            None => loop {
                let id = format!("s{}", self.next_session.fetch_add(1, Ordering::SeqCst));
                if !self.sessions.read().unwrap_or_else(|p| p.into_inner()).contains_key(&id) {
                    break id;
                }
            },
        };
        let slot = self.insert(PromptTree::new(&id))?;
        slot.persist(&slot.lock())?;
        Ok(slot)
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<SessionSlot>> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NoSession(id.into()))
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect()
    }

    pub fn new_job(&self, session_id: &str, op: &str) -> Arc<Job> {
        let id = format!("j{}", self.next_job.fetch_add(1, Ordering::SeqCst));
        let job = Arc::new(Job::new(id.clone(), session_id.into(), op));
        self.jobs.write().unwrap_or_else(|p| p.into_inner()).insert(id, job.clone());
        job
    }

    pub fn job(&self, id: &str) -> ApiResult<Arc<Job>> {
        self.jobs
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NoJob(id.into()))
    }
}
