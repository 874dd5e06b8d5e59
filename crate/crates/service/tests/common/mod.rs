#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use ladder_core::llm_gateway::LlmBackend;
use ladder_service::{AppState, Engine};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::Value;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// An in-process server on an ephemeral port, stopped on drop.
pub struct Server {
    pub base: String,
    pub data: PathBuf,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
    client: Client,
}

impl Server {
    pub fn start(backend: Arc<dyn LlmBackend>, data: &Path) -> Server {
        Self::with_engine(Engine::new(backend), data)
    }

    pub fn with_engine(engine: Engine, data: &Path) -> Server {
        let state = Arc::new(AppState::open(engine, data.to_path_buf()).unwrap());
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        std_listener.set_nonblocking(true).unwrap();
        let addr = std_listener.local_addr().unwrap();
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).unwrap();
                axum::serve(listener, ladder_service::api::router(state))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .unwrap();
            });
        });
        Server {
            base: format!("http://{addr}"),
            data: data.to_path_buf(),
            stop: Some(tx),
            thread: Some(thread),
            client: Client::builder().timeout(Duration::from_secs(30)).build().unwrap(),
        }
    }

    pub fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().unwrap();
        decode(r)
    }

    pub fn post(&self, path: &str, body: &Value) -> (StatusCode, Value) {
        self.send(reqwest::Method::POST, path, &body.to_string())
    }

    pub fn send(&self, method: reqwest::Method, path: &str, body: &str) -> (StatusCode, Value) {
        let r = self
            .client
            .request(method, format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .unwrap();
        decode(r)
    }

    /// Reads a job's whole event stream, optionally resuming after an id.
    pub fn events(&self, job: &str, last_id: Option<usize>) -> Vec<(String, Value)> {
        let mut req = self.client.get(format!("{}/jobs/{job}/events", self.base));
        if let Some(id) = last_id {
            req = req.header("last-event-id", id.to_string());
        }
        let text = req.send().unwrap().text().unwrap();
        parse_sse(&text)
    }

    /// Starts a long op and returns its events and final job snapshot.
    pub fn run_job(&self, path: &str, body: &Value) -> (Vec<(String, Value)>, Value) {
        let (status, ticket) = self.post(path, body);
        assert_eq!(status, StatusCode::ACCEPTED, "{ticket}");
        let id = ticket["job_id"].as_str().unwrap().to_string();
        let events = self.events(&id, None);
        let (_, snap) = self.get(&format!("/jobs/{id}"));
        (events, snap)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn decode(r: reqwest::blocking::Response) -> (StatusCode, Value) {
    let status = r.status();
    let text = r.text().unwrap();
    let v = if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap_or(Value::String(text)) };
    (status, v)
}

pub fn parse_sse(text: &str) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    for frame in text.split("\n\n") {
        let mut kind = None;
        let mut data = String::new();
        for line in frame.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                kind = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push_str(v.trim_start());
            }
        }
        if let Some(k) = kind {
            out.push((k, serde_json::from_str(&data).unwrap()));
        }
    }
    out
}

/// Copies the golden scenario session into `data` so the server loads it.
pub fn seed_golden(data: &Path) {
    let dir = data.join("fig2");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::copy(fixtures().join("golden/session.json"), dir.join("session.json")).unwrap();
}

pub fn version(v: &Value) -> u64 {
    v["session"]["version"].as_u64().unwrap()
}
