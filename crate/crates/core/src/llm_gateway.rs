//! Language-model access: chat messages, the few-shot template store,
//! canonical request keys and the backends (HTTP, fixture mock, scripted,
//! recording).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LadderError, Result};
use crate::gen_cache::{CacheLookup, GenCache};
use crate::prompt_tree::NodeId;
use crate::text::normalize_newlines;

pub const DEFAULT_CONTEXT_BUDGET: usize = 64 * 1024;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 0.0,
            max_tokens: 2048,
        }
    }
}

/// One fully rendered request. The key covers template name and slot values
/// only, so it does not move when a template's wording is revised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub template: String,
    pub slots: BTreeMap<String, String>,
    pub messages: Vec<ChatMessage>,
    pub params: DecodingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<NodeId>,
}

impl CompletionRequest {
    pub fn key(&self) -> String {
        request_key(&self.template, &self.slots)
    }

    /// Bytes counted against the context budget.
    pub fn serialized_size(&self) -> usize {
        #[derive(Serialize)]
        struct Wire<'a> {
            messages: &'a [ChatMessage],
            params: &'a DecodingParams,
        }
        serde_json::to_vec(&Wire {
            messages: &self.messages,
            params: &self.params,
        })
        .map(|v| v.len())
        .unwrap_or(usize::MAX)
    }

    /// The last user message, used as the semantic cache query.
    pub fn query_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Serialize)]
struct KeyFields<'a> {
    template: &'a str,
    slots: &'a BTreeMap<String, String>,
}

/// Hex sha256 of `{"template":..,"slots":{..}}` with sorted slot names and
/// LF-normalized values.
pub fn request_key(template: &str, slots: &BTreeMap<String, String>) -> String {
    let slots: BTreeMap<String, String> = slots
        .iter()
        .map(|(k, v)| (k.clone(), normalize_newlines(v).into_owned()))
        .collect();
    let json = serde_json::to_vec(&KeyFields {
        template,
        slots: &slots,
    })
    .expect("key fields serialize");
    hex::encode(Sha256::digest(&json))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationExchange {
    pub key: String,
    pub template: String,
    pub messages: Vec<ChatMessage>,
    pub params: DecodingParams,
    pub response: String,
    pub backend_id: String,
    pub latency_ms: u64,
}

// ---------------------------------------------------------------------------
// Templates

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShot {
    pub user: String,
    pub assistant: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub name: String,
    pub version: u32,
    pub system: String,
    pub user: String,
    #[serde(default)]
    pub examples: Vec<FewShot>,
}

impl PromptTemplate {
    /// Slot names referenced by the system and user messages.
    pub fn slots(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for part in [&self.system, &self.user] {
            let mut rest = part.as_str();
            while let Some(i) = rest.find("{{") {
                let after = &rest[i + 2..];
                match after.find("}}") {
                    Some(j) => {
                        out.insert(after[..j].trim().to_string());
                        rest = &after[j + 2..];
                    }
                    None => break,
                }
            }
        }
        out
    }

    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<Vec<ChatMessage>> {
        let mut messages = Vec::with_capacity(2 + 2 * self.examples.len());
        messages.push(ChatMessage::new(Role::System, self.expand(&self.system, slots)?));
        for ex in &self.examples {
            messages.push(ChatMessage::new(Role::User, ex.user.trim_end()));
            messages.push(ChatMessage::new(Role::Assistant, ex.assistant.trim_end()));
        }
        messages.push(ChatMessage::new(Role::User, self.expand(&self.user, slots)?));
        Ok(messages)
    }

    // Single pass: slot values are never re-expanded.
    fn expand(&self, text: &str, slots: &BTreeMap<String, String>) -> Result<String> {
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        while let Some(i) = rest.find("{{") {
            out.push_str(&rest[..i]);
            let after = &rest[i + 2..];
            let j = after.find("}}").ok_or_else(|| LadderError::Template {
                template: self.name.clone(),
                message: "unterminated slot".into(),
            })?;
            let name = after[..j].trim();
            let value = slots.get(name).ok_or_else(|| LadderError::Template {
                template: self.name.clone(),
                message: format!("missing slot `{name}`"),
            })?;
            out.push_str(&normalize_newlines(value));
            rest = &after[j + 2..];
        }
        out.push_str(rest);
        Ok(out.trim_end().to_string())
    }
}

const BUILTIN_TEMPLATES: [(&str, &str); 6] = [
    ("generate_block", include_str!("../templates/generate_block.toml")),
    ("propagate_changes", include_str!("../templates/propagate_changes.toml")),
    ("list_steps", include_str!("../templates/list_steps.toml")),
    ("recommend", include_str!("../templates/recommend.toml")),
    ("autocomplete_sentence", include_str!("../templates/autocomplete_sentence.toml")),
    ("supplement_merge", include_str!("../templates/supplement_merge.toml")),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateStore {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateStore {
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        for (name, src) in BUILTIN_TEMPLATES {
            let t = parse_template(name, src).expect("builtin template parses");
            templates.insert(name.to_string(), t);
        }
        TemplateStore { templates }
    }

    /// Builtins overridden by any `<name>.toml` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut store = Self::builtin();
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        for p in paths {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let t = parse_template(&name, &fs::read_to_string(&p)?)?;
            store.templates.insert(name, t);
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate> {
        self.templates.get(name).ok_or_else(|| LadderError::Template {
            template: name.to_string(),
            message: "unknown template".into(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(|s| s.as_str())
    }

    pub fn render(&self, name: &str, slots: &BTreeMap<String, String>) -> Result<Vec<ChatMessage>> {
        self.get(name)?.render(slots)
    }
}

fn parse_template(name: &str, src: &str) -> Result<PromptTemplate> {
    let t: PromptTemplate = toml::from_str(src).map_err(|e| LadderError::Template {
        template: name.to_string(),
        message: e.to_string(),
    })?;
    if t.name != name {
        return Err(LadderError::Template {
            template: name.to_string(),
            message: format!("file declares name `{}`", t.name),
        });
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Backends

pub trait LlmBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<String>;
}

pub const FIXTURE_KIND: &str = "ladder.fixtures";

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    Exact,
    /// `key` is a prefix of the request key.
    Prefix,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureRecord {
    pub key: String,
    #[serde(default)]
    pub match_mode: MatchMode,
    pub template: String,
    /// The slots the key was computed from, kept for reviewers.
    #[serde(default)]
    pub key_fields: BTreeMap<String, String>,
    pub response: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureFile {
    pub version: u32,
    pub kind: String,
    pub records: Vec<FixtureRecord>,
}

impl FixtureFile {
    pub fn new(records: Vec<FixtureRecord>) -> Self {
        FixtureFile {
            version: 1,
            kind: FIXTURE_KIND.to_string(),
            records,
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let f: FixtureFile = serde_path_to_error::deserialize(de)
            .map_err(|e| LadderError::parse(format!("{origin}:{}", e.path()), e.into_inner().to_string()))?;
        if f.version != 1 || f.kind != FIXTURE_KIND {
            return Err(LadderError::parse(origin, "not a version 1 fixture file"));
        }
        Ok(f)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("fixtures serialize");
        s.push('\n');
        s
    }
}

/// Replays recorded responses by canonical request key.
pub struct MockBackend {
    exact: BTreeMap<String, String>,
    prefix: Vec<(String, String)>,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn from_records(records: impl IntoIterator<Item = FixtureRecord>) -> Result<Self> {
        let mut exact = BTreeMap::new();
        let mut prefix = Vec::new();
        for r in records {
            match r.match_mode {
                MatchMode::Exact => {
                    if let Some(prev) = exact.insert(r.key.clone(), r.response.clone()) {
                        if prev != r.response {
                            return Err(LadderError::parse(
                                format!("records[{}]", r.key),
                                "conflicting responses for one key",
                            ));
                        }
                    }
                }
                MatchMode::Prefix => prefix.push((r.key, r.response)),
            }
        }
        // Longest prefix wins.
        prefix.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        Ok(MockBackend {
            exact,
            prefix,
            calls: AtomicU64::new(0),
        })
    }

    /// Loads every `*.json` fixture file in `dir`, in name order.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut records = Vec::new();
        for p in paths {
            let f = FixtureFile::parse(&fs::read_to_string(&p)?, &p.display().to_string())?;
            records.extend(f.records);
        }
        Self::from_records(records)
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.exact.len() + self.prefix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LlmBackend for MockBackend {
    fn backend_id(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = request.key();
        if let Some(r) = self.exact.get(&key) {
            return Ok(r.clone());
        }
        self.prefix
            .iter()
            .find(|(p, _)| key.starts_with(p.as_str()))
            .map(|(_, r)| r.clone())
            .ok_or(LadderError::MockMiss {
                template: request.template.clone(),
                key,
            })
    }
}

type Rule = dyn Fn(&CompletionRequest) -> Option<String> + Send + Sync;

/// Computes responses from the request with a closure. A `None` answer is a
/// miss.
pub struct ScriptedBackend {
    id: String,
    rule: Box<Rule>,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(id: &str, rule: impl Fn(&CompletionRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        ScriptedBackend {
            id: id.to_string(),
            rule: Box::new(rule),
            calls: AtomicU64::new(0),
        }
    }

    /// Answers every request with the same text.
    pub fn constant(text: &str) -> Self {
        let text = text.to_string();
        Self::new("constant", move |_| Some(text.clone()))
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmBackend for ScriptedBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.rule)(request).ok_or_else(|| LadderError::MockMiss {
            template: request.template.clone(),
            key: request.key(),
        })
    }
}

pub const RULES_KIND: &str = "ladder.rules";

/// One scripted answer. It applies when the template matches, every slot in
/// `equals` has exactly that value and every slot in `contains` contains the
/// given text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRule {
    pub template: String,
    #[serde(default)]
    pub equals: BTreeMap<String, String>,
    #[serde(default)]
    pub contains: BTreeMap<String, String>,
    pub response: String,
}

impl ResponseRule {
    pub fn matches(&self, request: &CompletionRequest) -> bool {
        self.template == request.template
            && self.equals.iter().all(|(k, v)| request.slots.get(k) == Some(v))
            && self
                .contains
                .iter()
                .all(|(k, v)| request.slots.get(k).is_some_and(|s| s.contains(v.as_str())))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleFile {
    pub version: u32,
    pub kind: String,
    pub rules: Vec<ResponseRule>,
}

impl RuleFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let f: RuleFile = serde_path_to_error::deserialize(de)
            .map_err(|e| LadderError::parse(format!("{}:{}", path.display(), e.path()), e.into_inner().to_string()))?;
        if f.version != 1 || f.kind != RULES_KIND {
            return Err(LadderError::parse(path.display().to_string(), "not a version 1 rule file"));
        }
        Ok(f)
    }

    /// A backend answering with the first matching rule.
    pub fn into_backend(self) -> ScriptedBackend {
        ScriptedBackend::new("rules", move |r| {
            self.rules.iter().find(|rule| rule.matches(r)).map(|rule| rule.response.clone())
        })
    }
}

/// Forwards to an inner backend and keeps every answer as a fixture record.
pub struct RecordingBackend {
    inner: Arc<dyn LlmBackend>,
    records: Mutex<BTreeMap<String, FixtureRecord>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn LlmBackend>) -> Self {
        RecordingBackend {
            inner,
            records: Mutex::new(BTreeMap::new()),
        }
    }

    /// Records sorted by template, then key.
    pub fn fixture_file(&self) -> FixtureFile {
        let mut records: Vec<FixtureRecord> = self.records.lock().expect("recorder lock").values().cloned().collect();
        records.sort_by(|a, b| a.template.cmp(&b.template).then(a.key.cmp(&b.key)));
        FixtureFile::new(records)
    }
}

impl LlmBackend for RecordingBackend {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        let response = self.inner.complete(request)?;
        let key = request.key();
        self.records.lock().expect("recorder lock").insert(
            key.clone(),
            FixtureRecord {
                key,
                match_mode: MatchMode::Exact,
                template: request.template.clone(),
                key_fields: request.slots.clone(),
                response: response.clone(),
            },
        );
        Ok(response)
    }
}

#[derive(Clone, Debug)]
pub struct HttpConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
}

impl HttpConfig {
    /// Reads `LADDER_LLM_URL`, `LADDER_LLM_KEY` and optionally `LADDER_LLM_MODEL`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var("LADDER_LLM_URL")
            .map_err(|_| LadderError::BackendUnavailable {
                attempts: 0,
                message: "LADDER_LLM_URL is not set".into(),
            })?;
        Ok(HttpConfig {
            url,
            api_key: std::env::var("LADDER_LLM_KEY").ok(),
            model: std::env::var("LADDER_LLM_MODEL").unwrap_or_else(|_| "gpt-4".into()),
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
        })
    }
}

/// Chat-completions over HTTP(S).
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Transient(String),
    Fatal(LadderError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LadderError::BackendUnavailable {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpBackend { config, client })
    }

    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<String, Attempt> {
        let mut req = self
            .client
            .post(&self.config.url)
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(k) = &self.config.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Transient(format!("HTTP {status}")));
        }
        let text = resp.text().map_err(|e| Attempt::Transient(e.to_string()))?;
        if !status.is_success() {
            return Err(Attempt::Fatal(LadderError::BackendRejected(format!("HTTP {status}: {text}"))));
        }
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(LadderError::BackendRejected(format!("invalid JSON: {e}"))))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| Attempt::Fatal(LadderError::BackendRejected("no choices[0].message.content".into())))
    }
}

impl LlmBackend for HttpBackend {
    fn backend_id(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": request.messages,
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        });
        let mut last = String::new();
        let attempts = self.config.max_retries + 1;
        for n in 0..attempts {
            if n > 0 {
                std::thread::sleep(self.config.backoff_base * 2u32.pow(n - 1));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(msg)) => {
                    tracing::warn!(attempt = n + 1, %msg, "transient backend failure");
                    last = msg;
                }
            }
        }
        Err(LadderError::BackendUnavailable {
            attempts,
            message: last,
        })
    }
}

// ---------------------------------------------------------------------------
// Gateway

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseSource {
    Backend,
    Cache,
}

/// A semantic cache neighbour offered to the user, never applied.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CacheSuggestion {
    pub key: String,
    pub similarity: f64,
    pub block: Option<NodeId>,
    pub response: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Completion {
    pub exchange: GenerationExchange,
    pub source: ResponseSource,
    pub suggestion: Option<CacheSuggestion>,
}

pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    templates: TemplateStore,
    params: DecodingParams,
    budget: usize,
    cache: Option<Mutex<GenCache>>,
    backend_calls: AtomicU64,
    log: Mutex<Vec<GenerationExchange>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Gateway {
            backend,
            templates: TemplateStore::builtin(),
            params: DecodingParams::default(),
            budget: DEFAULT_CONTEXT_BUDGET,
            cache: None,
            backend_calls: AtomicU64::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_templates(mut self, templates: TemplateStore) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_params(mut self, params: DecodingParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_cache(mut self, cache: GenCache) -> Self {
        self.cache = Some(Mutex::new(cache));
        self
    }

    pub fn templates(&self) -> &TemplateStore {
        &self.templates
    }

    pub fn backend_id(&self) -> &str {
        self.backend.backend_id()
    }

    /// Requests that reached the backend, cache hits excluded.
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn exchanges(&self) -> Vec<GenerationExchange> {
        self.log.lock().expect("log lock").clone()
    }

    /// Snapshot of the cache, if one is attached.
    pub fn cache_snapshot(&self) -> Option<GenCache> {
        self.cache.as_ref().map(|c| c.lock().expect("cache lock").clone())
    }

    pub fn render(&self, template: &str, slots: BTreeMap<String, String>, block: Option<NodeId>) -> Result<CompletionRequest> {
        let messages = self.templates.render(template, &slots)?;
        Ok(CompletionRequest {
            template: template.to_string(),
            slots,
            messages,
            params: self.params.clone(),
            block,
        })
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        let size = request.serialized_size();
        if size > self.budget {
            return Err(LadderError::ContextOverflow {
                size,
                budget: self.budget,
            });
        }
        let key = request.key();
        let mut suggestion = None;
        if let Some(cache) = &self.cache {
            match cache.lock().expect("cache lock").lookup(&key, request.query_text()) {
                CacheLookup::Exact(entry) => {
                    let mut exchange = entry.exchange.clone();
                    exchange.latency_ms = 0;
                    self.log.lock().expect("log lock").push(exchange.clone());
                    return Ok(Completion {
                        exchange,
                        source: ResponseSource::Cache,
                        suggestion: None,
                    });
                }
                CacheLookup::Semantic { entry, similarity } => {
                    suggestion = Some(CacheSuggestion {
                        key: entry.canonical_key.clone(),
                        similarity,
                        block: entry.block,
                        response: entry.exchange.response.clone(),
                    });
                }
                CacheLookup::Miss => {}
            }
        }
        let started = Instant::now();
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        let response = normalize_newlines(&self.backend.complete(request)?).into_owned();
        let exchange = GenerationExchange {
            key,
            template: request.template.clone(),
            messages: request.messages.clone(),
            params: request.params.clone(),
            response,
            backend_id: self.backend.backend_id().to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(cache) = &self.cache {
            cache
                .lock()
                .expect("cache lock")
                .insert(exchange.clone(), request.query_text(), request.block);
        }
        self.log.lock().expect("log lock").push(exchange.clone());
        Ok(Completion {
            exchange,
            source: ResponseSource::Backend,
            suggestion,
        })
    }

    /// Render and complete in one step.
    pub fn run(&self, template: &str, slots: BTreeMap<String, String>, block: Option<NodeId>) -> Result<Completion> {
        let request = self.render(template, slots, block)?;
        self.complete(&request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn builtin_templates_load() {
        let store = TemplateStore::builtin();
        let names: Vec<&str> = store.names().collect();
        assert_eq!(
            names,
            vec![
                "autocomplete_sentence",
                "generate_block",
                "list_steps",
                "propagate_changes",
                "recommend",
                "supplement_merge"
            ]
        );
        assert_eq!(store.get("generate_block").unwrap().examples.len(), 2);
    }

    #[test]
    fn missing_slot_is_named() {
        let store = TemplateStore::builtin();
        let err = store.render("generate_block", &BTreeMap::new()).unwrap_err();
        match err {
            LadderError::Template { template, message } => {
                assert_eq!(template, "generate_block");
                assert!(message.contains("missing slot"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(store.get("nope"), Err(LadderError::Template { .. })));
    }

    #[test]
    fn key_ignores_insertion_order_and_newline_style() {
        let mut a = BTreeMap::new();
        a.insert("b".to_string(), "x\r\ny".to_string());
        a.insert("a".to_string(), "1".to_string());
        let b = slots(&[("a", "1"), ("b", "x\ny")]);
        assert_eq!(request_key("t", &a), request_key("t", &b));
        assert_ne!(request_key("t", &b), request_key("u", &b));
    }

    #[test]
    fn mock_lookup_and_miss() {
        let gw_request = |v: &str| CompletionRequest {
            template: "t".into(),
            slots: slots(&[("v", v)]),
            messages: vec![ChatMessage::new(Role::User, v)],
            params: DecodingParams::default(),
            block: None,
        };
        let hit = gw_request("1");
        let mock = MockBackend::from_records([FixtureRecord {
            key: hit.key(),
            match_mode: MatchMode::Exact,
            template: "t".into(),
            key_fields: hit.slots.clone(),
            response: "def f(): pass".into(),
        }])
        .unwrap();
        assert_eq!(mock.complete(&hit).unwrap(), "def f(): pass");
        assert_eq!(mock.complete(&hit).unwrap(), "def f(): pass");
        assert_eq!(mock.call_count(), 2);
        assert!(matches!(mock.complete(&gw_request("2")), Err(LadderError::MockMiss { .. })));
    }

    #[test]
    fn prefix_records_match_key_prefixes() {
        let req = CompletionRequest {
            template: "t".into(),
            slots: BTreeMap::new(),
            messages: vec![],
            params: DecodingParams::default(),
            block: None,
        };
        let key = req.key();
        let rec = |k: &str, r: &str| FixtureRecord {
            key: k.to_string(),
            match_mode: MatchMode::Prefix,
            template: "t".into(),
            key_fields: BTreeMap::new(),
            response: r.into(),
        };
        let mock = MockBackend::from_records([rec(&key[..4], "short"), rec(&key[..8], "long")]).unwrap();
        assert_eq!(mock.complete(&req).unwrap(), "long");
    }

    #[test]
    fn budget_checked_before_backend() {
        let backend = Arc::new(ScriptedBackend::constant("x"));
        let gw = Gateway::new(backend.clone()).with_budget(10);
        let req = gw
            .render("autocomplete_sentence", slots(&[("context", "c"), ("draft", "Train Regre")]), None)
            .unwrap();
        let size = req.serialized_size();
        match gw.complete(&req) {
            Err(LadderError::ContextOverflow { size: s, budget }) => {
                assert_eq!((s, budget), (size, 10));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(backend.call_count(), 0);
        assert_eq!(gw.backend_calls(), 0);
    }

    #[test]
    fn recorder_round_trips_through_fixture_file() {
        let inner = Arc::new(ScriptedBackend::new("s", |r| Some(format!("echo {}", r.slots["draft"]))));
        let rec = Arc::new(RecordingBackend::new(inner));
        let gw = Gateway::new(rec.clone());
        let s = slots(&[("context", "c"), ("draft", "Plot")]);
        let first = gw.run("autocomplete_sentence", s.clone(), None).unwrap();
        let file = FixtureFile::parse(&rec.fixture_file().to_json(), "mem").unwrap();
        let replay = Gateway::new(Arc::new(MockBackend::from_records(file.records).unwrap()));
        let second = replay.run("autocomplete_sentence", s, None).unwrap();
        assert_eq!(first.exchange.response, second.exchange.response);
        assert_eq!(first.exchange.key, second.exchange.key);
    }
}
