//! HTTP routes. One endpoint per engine operation; mutations carry the tree
//! version the client last saw and fail with 409 when it is stale. Long
//! operations answer 202 with a job id whose progress streams as SSE.

use std::convert::Infallible;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use axum::extract::{FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::Stream;
use ladder_core::codegen::ChainEvent;
use ladder_core::executor::RunResult;
use ladder_core::prompt_tree::{ChangeScope, Scope, SupplementTarget};
use ladder_core::segment_map::{CodeEdit, SegmentMapFile};
use ladder_core::session::Session;
use ladder_core::{NodeId, Relation};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ApiError, ApiResult};
use crate::state::{check_version, AppState, Job, SessionHandle, SessionSlot};

type Shared = Arc<AppState>;

/// JSON body whose rejections use the structured error shape.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(r) => Err(ApiError::BadRequest(r.body_text())),
        }
    }
}

/// Query string with structured rejections.
pub struct Q<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequestParts<S> for Q<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, ApiError> {
        match Query::<T>::from_request_parts(parts, state).await {
            Ok(Query(v)) => Ok(Q(v)),
            Err(r) => Err(ApiError::BadRequest(r.body_text())),
        }
    }
}

fn node(raw: &str) -> ApiResult<NodeId> {
    raw.parse().map_err(|_| ApiError::BadRequest(format!("`{raw}` is not a block id")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

#[derive(Serialize)]
pub struct Mutation<T> {
    pub session: SessionHandle,
    pub result: T,
}

/// Runs `f` under the session lock after the version check. Any change is
/// written to disk before the response is built.
async fn mutate<T: Serialize + Send + 'static>(
    st: Shared,
    sid: String,
    expected: u64,
    f: impl FnOnce(&mut Session) -> ladder_core::Result<T> + Send + 'static,
) -> ApiResult<Json<Mutation<T>>> {
    blocking(move || {
        let slot = st.session(&sid)?;
        let mut s = slot.lock();
        check_version(&s, expected)?;
        let before = s.version();
        let r = f(&mut s);
        if s.version() != before {
            slot.persist(&s)?;
        }
        Ok(Json(Mutation {
            session: slot.handle(&s),
            result: r?,
        }))
    })
    .await
}

async fn read<T: Serialize + Send + 'static>(
    st: Shared,
    sid: String,
    f: impl FnOnce(&SessionSlot, &Session) -> ApiResult<T> + Send + 'static,
) -> ApiResult<Json<T>> {
    blocking(move || {
        let slot = st.session(&sid)?;
        let s = slot.lock();
        f(&slot, &s).map(Json)
    })
    .await
}

#[derive(Serialize, Deserialize)]
pub struct JobTicket {
    pub job_id: String,
    pub session_id: String,
    pub op: String,
    pub events: String,
}

type Work = Box<dyn FnOnce(&mut Session, &Job) -> ladder_core::Result<Value> + Send>;

/// Checks the version now and again when the job acquires the session, since
/// other commands may be queued ahead of it.
async fn start_job(st: Shared, sid: String, op: &'static str, expected: Option<u64>, work: Work) -> ApiResult<impl IntoResponse> {
    let slot = {
        let st = st.clone();
        let sid = sid.clone();
        blocking(move || {
            let slot = st.session(&sid)?;
            if let Some(v) = expected {
                check_version(&slot.lock(), v)?;
            }
            Ok(slot)
        })
        .await?
    };
    let job = st.new_job(&sid, op);
    let ticket = JobTicket {
        job_id: job.id.clone(),
        session_id: sid,
        op: op.into(),
        events: format!("/jobs/{}/events", job.id),
    };
    tokio::task::spawn_blocking(move || {
        let mut s = slot.lock();
        let outcome = (|| {
            if let Some(v) = expected {
                check_version(&s, v)?;
            }
            job.emit("started", json!({ "op": op, "session": slot.handle(&s) }));
            let before = s.version();
            let r = work(&mut s, &job);
            if s.version() != before {
                slot.persist(&s)?;
            }
            Ok(json!({ "session": slot.handle(&s), "result": r? }))
        })();
        job.finish(outcome);
    });
    Ok((StatusCode::ACCEPTED, Json(ticket)))
}

fn to_value<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("response serializes")
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{sid}", get(get_session))
        .route("/sessions/{sid}/document", get(get_document))
        .route("/sessions/{sid}/export", post(export))
        .route("/sessions/{sid}/blocks", post(add_block))
        .route("/sessions/{sid}/blocks/{id}", get(get_block).delete(delete_block))
        .route("/sessions/{sid}/blocks/{id}/prompt", post(edit_prompt))
        .route("/sessions/{sid}/blocks/{id}/duplicate", post(duplicate_block))
        .route("/sessions/{sid}/blocks/{id}/move", post(move_block))
        .route("/sessions/{sid}/blocks/{id}/supplements", post(add_supplement))
        .route("/sessions/{sid}/blocks/{id}/fold", post(set_folded))
        .route("/sessions/{sid}/blocks/{id}/scope", post(set_scope))
        .route("/sessions/{sid}/blocks/{id}/generate", post(generate))
        .route("/sessions/{sid}/blocks/{id}/list_steps", post(list_steps))
        .route("/sessions/{sid}/blocks/{id}/recommendations", post(recommend))
        .route("/sessions/{sid}/blocks/{id}/recommendations/{index}/accept", post(accept_recommendation))
        .route("/sessions/{sid}/blocks/{id}/autocomplete/sentence", post(autocomplete_sentence))
        .route("/sessions/{sid}/blocks/{id}/autocomplete/word", get(autocomplete_word))
        .route("/sessions/{sid}/blocks/{id}/view", get(visible_slice))
        .route("/sessions/{sid}/blocks/{id}/links", get(links))
        .route("/sessions/{sid}/blocks/{id}/run", post(run_block))
        .route("/sessions/{sid}/propagate", post(propagate))
        .route("/sessions/{sid}/code_edit", post(code_edit))
        .route("/jobs/{jid}", get(get_job))
        .route("/jobs/{jid}/events", get(job_events))
        .route("/jobs/{jid}/cancel", post(cancel_job))
        .with_state(state)
}

async fn health(State(st): State<Shared>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "backend": st.engine.backend.backend_id(),
        "sessions": st.session_ids().len(),
    }))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub session_id: Option<String>,
}

async fn create_session(State(st): State<Shared>, Body(b): Body<CreateSession>) -> ApiResult<impl IntoResponse> {
    let handle = blocking(move || {
        let slot = st.create_session(b.session_id)?;
        let s = slot.lock();
        Ok(slot.handle(&s))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn list_sessions(State(st): State<Shared>) -> Json<Value> {
    Json(json!({ "sessions": st.session_ids() }))
}

async fn get_session(State(st): State<Shared>, Path(sid): Path<String>) -> ApiResult<Json<Value>> {
    read(st, sid, |slot, s| {
        let doc: Value = serde_json::from_str(&s.session_json()).expect("session document is JSON");
        Ok(json!({ "session": slot.handle(s), "document": doc }))
    })
    .await
}

async fn get_document(State(st): State<Shared>, Path(sid): Path<String>) -> ApiResult<Json<Value>> {
    read(st, sid, |slot, s| {
        let map = SegmentMapFile::from_document(&slot.id, s.document());
        Ok(json!({ "session": slot.handle(s), "text": s.document().text, "map": map }))
    })
    .await
}

async fn get_block(State(st): State<Shared>, Path((sid, id)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let id = node(&id)?;
    read(st, sid, move |slot, s| {
        let b = s.tree().block(id)?;
        Ok(json!({
            "session": slot.handle(s),
            "id": id,
            "parent": b.parent(),
            "children": b.children(),
            "prompt": b.prompt(),
            "own_code": b.own_code(),
            "range": s.document().range(id).ok(),
        }))
    })
    .await
}

async fn export(State(st): State<Shared>, Path(sid): Path<String>) -> ApiResult<Json<Value>> {
    read(st, sid, |slot, s| {
        let paths = s.export(&slot.dir.join("export"))?;
        Ok(json!({ "session": slot.handle(s), "paths": paths, "program": s.document().text }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddBlock {
    pub expected_version: u64,
    pub anchor: NodeId,
    pub relation: Relation,
    pub prompt: String,
}

async fn add_block(State(st): State<Shared>, Path(sid): Path<String>, Body(b): Body<AddBlock>) -> ApiResult<impl IntoResponse> {
    let r = mutate(st, sid, b.expected_version, move |s| {
        let id = s.add_block(b.anchor, b.relation, &b.prompt)?;
        Ok(json!({ "id": id }))
    })
    .await?;
    Ok((StatusCode::CREATED, r))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditPrompt {
    pub expected_version: u64,
    pub prompt: String,
}

async fn edit_prompt(
    State(st): State<Shared>,
    Path((sid, id)): Path<(String, String)>,
    Body(b): Body<EditPrompt>,
) -> ApiResult<Json<Mutation<Value>>> {
    let id = node(&id)?;
    mutate(st, sid, b.expected_version, move |s| {
        let r = s.edit_prompt(id, &b.prompt)?;
        Ok(json!({ "scope": ChangeScope::from(&r), "receipt": r }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    pub expected_version: u64,
}

async fn delete_block(
    State(st): State<Shared>,
    Path((sid, id)): Path<(String, String)>,
    Q(q): Q<Expected>,
) -> ApiResult<Json<Mutation<Value>>> {
    let id = node(&id)?;
    mutate(st, sid, q.expected_version, move |s| {
        let r = s.delete_block(id)?;
        Ok(json!({ "scope": ChangeScope::from(&r), "receipt": r }))
    })
    .await
}

async fn duplicate_block(
    State(st): State<Shared>,
    Path((sid, id)): Path<(String, String)>,
    Body(b): Body<Expected>,
) -> ApiResult<impl IntoResponse> {
    let id = node(&id)?;
    let r = mutate(st, sid, b.expected_version, move |s| Ok(json!({ "id": s.duplicate_block(id)? }))).await?;
    Ok((StatusCode::CREATED, r))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveBlock {
    pub expected_version: u64,
    pub parent: NodeId,
    pub position: usize,
}

async fn move_block(
    State(st): State<Shared>,
    Path((sid, id)): Path<(String, String)>,
    Body(b): Body<MoveBlock>,
) -> ApiResult<Json<Mutation<Value>>> {
    let id = node(&id)?;
    mutate(st, sid, b.expected_version, move |s| {
        let r = s.move_block(id, b.parent, b.position)?;
        Ok(json!({ "scope": ChangeScope::from(&r), "receipt": r }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddSupplement {
    pub expected_version: u64,
    pub text: String,
    /// Own-code line range `[start, end)` the supplement refers to.
    pub range: Option<(usize, usize)>,
}

async fn add_supplement(
    State(st): State<Shared>,
    Path((sid, id)): Path<(String, String)>,
    Body(b): Body<AddSupplement>,
) -> ApiResult<impl IntoResponse> {
    let id = node(&id)?;
    let target = match b.range {
        Some((start, end)) => SupplementTarget::Range { start, end },
        None => SupplementTarget::Whole,
    };
    let r = mutate(st, sid, b.expected_version, move |s| {
        let (sup, scope) = s.add_supplement(id, &b.text, target)?;
        Ok(json!({ "supplement": sup, "scope": scope }))
    })
    .await?;
    Ok((StatusCode::CREATED, r))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetFolded {
    pub expected_version: u64,
    pub folded: bool,
}

async fn set_folded(
    State(st): State<Shared>,
    Path((sid, id)): Path<(String, String)>,
    Body(b): Body<SetFolded>,
) -> ApiResult<Json<Mutation<Value>>> {
    let id = node(&id)?;
    mutate(st, sid, b.expected_version, move |s| {
        s.set_folded(id, b.folded)?;
        Ok(json!({ "id": id, "folded": b.folded }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetScope {
    pub expected_version: u64,
    pub scope: Scope,
}

async fn set_scope(
    State(st): State<Shared>,
    Path((sid, id)): Path<(String, String)>,
    Body(b): Body<SetScope>,
) -> ApiResult<Json<Mutation<Value>>> {
    let id = node(&id)?;
    mutate(st, sid, b.expected_version, move |s| {
        s.set_scope(id, b.scope)?;
        Ok(json!({ "id": id, "scope": b.scope }))
    })
    .await
}

async fn generate(
    State(st): State<Shared>,
    Path((sid, id)): Path<(String, String)>,
    Body(b): Body<Expected>,
) -> ApiResult<impl IntoResponse> {
    let id = node(&id)?;
    start_job(st, sid, "generate", Some(b.expected_version), Box::new(move |s, _| Ok(to_value(s.generate(id)?)))).await
}

async fn list_steps(
    State(st): State<Shared>,
    Path((sid, id)): Path<(String, String)>,
    Body(b): Body<Expected>,
) -> ApiResult<impl IntoResponse> {
    let id = node(&id)?;
    start_job(st, sid, "list_steps", Some(b.expected_version), Box::new(move |s, _| Ok(to_value(s.list_steps(id)?)))).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Propagate {
    pub expected_version: u64,
    pub scope: ChangeScope,
}

/// Chain progress is streamed as `step_started` / `step_finished` events,
/// one pair per plan step that ran.
async fn propagate(State(st): State<Shared>, Path(sid): Path<String>, Body(b): Body<Propagate>) -> ApiResult<impl IntoResponse> {
    start_job(
        st,
        sid,
        "propagate",
        Some(b.expected_version),
        Box::new(move |s, job| {
            let mut observer = |e: &ChainEvent| {
                let kind = match e {
                    ChainEvent::StepStarted { .. } => "step_started",
                    ChainEvent::StepFinished { .. } => "step_finished",
                };
                job.emit(kind, to_value(e));
            };
            Ok(to_value(s.propagate(&b.scope, &mut observer, &job.cancel)?))
        }),
    )
    .await
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub expected_version: Option<u64>,
}

async fn run_block(
    State(st): State<Shared>,
    Path((sid, id)): Path<(String, String)>,
    Body(b): Body<RunBlock>,
) -> ApiResult<impl IntoResponse> {
    let id = node(&id)?;
    start_job(
        st,
        sid,
        "run",
        b.expected_version,
        Box::new(move |s, job| {
            let r: RunResult = s.run_block(id, Some(&job.cancel))?;
            Ok(to_value(r))
        }),
    )
    .await
}

async fn recommend(State(st): State<Shared>, Path((sid, id)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let id = node(&id)?;
    blocking(move || {
        let slot = st.session(&sid)?;
        let mut s = slot.lock();
        let recs = s.recommend(id)?;
        Ok(Json(json!({ "session": slot.handle(&s), "recommendations": recs })))
    })
    .await
}

async fn accept_recommendation(
    State(st): State<Shared>,
    Path((sid, id, index)): Path<(String, String, String)>,
    Body(b): Body<Expected>,
) -> ApiResult<impl IntoResponse> {
    let id = node(&id)?;
    let index: usize = index.parse().map_err(|_| ApiError::BadRequest(format!("`{index}` is not an index")))?;
    let r = mutate(st, sid, b.expected_version, move |s| Ok(json!({ "id": s.accept_recommendation(id, index)? }))).await?;
    Ok((StatusCode::CREATED, r))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sentence {
    pub draft: String,
}

async fn autocomplete_sentence(
    State(st): State<Shared>,
    Path((sid, id)): Path<(String, String)>,
    Body(b): Body<Sentence>,
) -> ApiResult<Json<Value>> {
    let id = node(&id)?;
    read(st, sid, move |_, s| Ok(json!({ "completion": s.autocomplete_sentence(id, &b.draft)? }))).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Word {
    pub prefix: String,
}

async fn autocomplete_word(
    State(st): State<Shared>,
    Path((sid, id)): Path<(String, String)>,
    Q(q): Q<Word>,
) -> ApiResult<Json<Value>> {
    let id = node(&id)?;
    read(st, sid, move |_, s| Ok(json!({ "candidates": s.autocomplete_word(id, &q.prefix)? }))).await
}

async fn visible_slice(State(st): State<Shared>, Path((sid, id)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let id = node(&id)?;
    read(st, sid, move |_, s| Ok(to_value(s.visible_slice(id)?))).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

async fn links(
    State(st): State<Shared>,
    Path((sid, id)): Path<(String, String)>,
    Q(q): Q<Span>,
) -> ApiResult<Json<Value>> {
    let id = node(&id)?;
    read(st, sid, move |_, s| Ok(json!({ "links": s.links_for(id, q.start, q.end)? }))).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeEditBody {
    pub expected_version: u64,
    pub start_line: usize,
    pub end_line: usize,
    pub text: String,
}

async fn code_edit(State(st): State<Shared>, Path(sid): Path<String>, Body(b): Body<CodeEditBody>) -> ApiResult<Json<Mutation<Value>>> {
    let edit = CodeEdit {
        start_line: b.start_line,
        end_line: b.end_line,
        text: b.text,
    };
    mutate(st, sid, b.expected_version, move |s| Ok(to_value(s.code_edit(&edit)?))).await
}

async fn get_job(State(st): State<Shared>, Path(jid): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(to_value(st.job(&jid)?.snapshot())))
}

async fn cancel_job(State(st): State<Shared>, Path(jid): Path<String>) -> ApiResult<Json<Value>> {
    let job = st.job(&jid)?;
    job.cancel.store(true, Ordering::SeqCst);
    Ok(Json(to_value(job.snapshot())))
}

/// Replays the job's events from the start (or after `Last-Event-ID`) and
/// follows it until it ends.
async fn job_events(
    State(st): State<Shared>,
    Path(jid): Path<String>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let job = st.job(&jid)?;
    let from = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok())
        .map_or(0, |n| n + 1);
    let rx = job.subscribe();
    let stream = futures_util::stream::unfold((job, rx, from), |(job, mut rx, next)| async move {
        loop {
            let (events, ended) = job.events_from(next);
            if let Some(e) = events.into_iter().next() {
                let ev = Event::default()
                    .event(e.kind.clone())
                    .id(e.seq.to_string())
                    .data(serde_json::to_string(&e).expect("event serializes"));
                return Some((Ok(ev), (job, rx, next + 1)));
            }
            if ended || rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
