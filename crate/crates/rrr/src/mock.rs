//! Offline stand-ins for the search engine, the web and the chat LLM, usable
//! in-process or behind a local HTTP server that speaks the real wire formats.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle, ThreadId};

use rrr_core::prompt::{READER_INSTRUCTION, REWRITER_MULTI_CHOICE_INSTRUCTION, REWRITER_OPEN_QA_INSTRUCTION, SENTINEL};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::llm::{ChatModel, ChatRequest, LlmError};
use crate::retrieval::{html_to_text, PageFetcher, RetrievalError, SearchEngine, SearchHit};

pub const DEFAULT_BASE: &str = "http://mock.local";

const STOPWORDS: &[&str] =
    &["a", "an", "the", "of", "in", "on", "at", "to", "is", "was", "are", "were", "and", "or", "for", "by", "what", "who", "which", "when", "where", "how", "did", "does", "do"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockPage {
    /// Path such as `/wiki/Paris`; hits carry it prefixed by the base url.
    pub url: String,
    #[serde(default)]
    pub title: String,
    pub body: String,
}

/// Gold answers for one question, optionally gated on evidence strings that
/// differ from the answer (multi-choice letters never appear in documents).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReaderAnswer {
    Golds(Vec<String>),
    Evidence { answer: String, evidence: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReaderBehavior {
    #[default]
    Extractive,
    Scripted,
    KeywordReward,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderRule {
    #[serde(default)]
    pub behavior: ReaderBehavior,
    /// Question text (as it appears in the prompt) to answer.
    #[serde(default)]
    pub answers: BTreeMap<String, ReaderAnswer>,
    /// sha256 hex of the full prompt to completion.
    #[serde(default)]
    pub scripted: BTreeMap<String, String>,
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub keyword: Option<String>,
    #[serde(default = "default_completion")]
    pub default: String,
}

fn default_completion() -> String {
    format!("unknown{SENTINEL}")
}

impl Default for ReaderRule {
    fn default() -> Self {
        Self {
            behavior: ReaderBehavior::default(),
            answers: BTreeMap::new(),
            scripted: BTreeMap::new(),
            strict: false,
            keyword: None,
            default: default_completion(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockFixture {
    pub pages: Vec<MockPage>,
    #[serde(default)]
    pub reader: ReaderRule,
    /// Question text to rewriter completion; unknown questions are echoed.
    #[serde(default)]
    pub rewrites: BTreeMap<String, String>,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("duplicate page url {0}")]
    DuplicateUrl(String),
}

impl MockFixture {
    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let text = std::fs::read_to_string(path).map_err(|source| FixtureError::Io { path: path.display().to_string(), source })?;
        let f: Self = serde_json::from_str(&text).map_err(|source| FixtureError::Parse { path: path.display().to_string(), source })?;
        f.check()?;
        Ok(f)
    }

    pub fn check(&self) -> Result<(), FixtureError> {
        let mut seen = HashSet::new();
        for p in &self.pages {
            if !seen.insert(&p.url) {
                return Err(FixtureError::DuplicateUrl(p.url.clone()));
            }
        }
        Ok(())
    }
}

fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

fn content_terms(text: &str) -> HashSet<String> {
    terms(text).into_iter().filter(|t| !STOPWORDS.contains(&t.as_str())).collect()
}

/// Last search query issued from each thread. The keyword reader consults the
/// entry for its own thread, so a sample's search and read must run on one
/// thread (the pipeline does this).
#[derive(Debug, Default)]
pub struct QueryLog {
    last: Mutex<HashMap<ThreadId, String>>,
    all: Mutex<Vec<String>>,
}

impl QueryLog {
    pub fn record(&self, query: &str) {
        self.last.lock().expect("query log poisoned").insert(thread::current().id(), query.to_string());
        self.all.lock().expect("query log poisoned").push(query.to_string());
    }

    pub fn last_for_current_thread(&self) -> Option<String> {
        self.last.lock().expect("query log poisoned").get(&thread::current().id()).cloned()
    }

    pub fn all(&self) -> Vec<String> {
        self.all.lock().expect("query log poisoned").clone()
    }
}

/// Term-overlap search over fixture pages.
pub struct MockSearch {
    pages: Vec<MockPage>,
    page_terms: Vec<HashSet<String>>,
    base: String,
    pub log: Arc<QueryLog>,
}

impl MockSearch {
    pub fn new(pages: Vec<MockPage>, base: &str, log: Arc<QueryLog>) -> Self {
        let page_terms = pages.iter().map(|p| content_terms(&format!("{} {}", p.title, p.body))).collect();
        Self { pages, page_terms, base: base.trim_end_matches('/').to_string(), log }
    }

    /// Ranked by the number of distinct non-stopword query terms a page
    /// contains; ties keep fixture order. Pages with no overlap are dropped.
    pub fn rank(&self, query: &str, top_k: usize) -> Vec<SearchHit> {
        self.log.record(query);
        let q = content_terms(query);
        let mut scored: Vec<(usize, usize)> = self
            .page_terms
            .iter()
            .enumerate()
            .map(|(i, t)| (i, q.iter().filter(|w| t.contains(*w)).count()))
            .filter(|&(_, n)| n > 0)
            .collect();
        scored.sort_by_key(|s| std::cmp::Reverse(s.1));
        scored
            .into_iter()
            .take(top_k)
            .map(|(i, _)| {
                let p = &self.pages[i];
                SearchHit { url: format!("{}{}", self.base, p.url), title: p.title.clone(), snippet: snippet(&p.body, &q) }
            })
            .collect()
    }
}

/// Five words before the first matching body word through fifteen after.
fn snippet(body: &str, query: &HashSet<String>) -> String {
    let words: Vec<&str> = body.split_whitespace().collect();
    let first = words.iter().position(|w| terms(w).iter().any(|t| query.contains(t)));
    match first {
        Some(i) => words[i.saturating_sub(5)..(i + 16).min(words.len())].join(" "),
        None => words[..words.len().min(20)].join(" "),
    }
}

impl SearchEngine for MockSearch {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<SearchHit>, RetrievalError> {
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        if top_k == 0 {
            return Err(RetrievalError::ZeroTopK);
        }
        Ok(self.rank(query, top_k))
    }
}

pub fn render_page(page: &MockPage) -> String {
    format!("<html><head><title>{}</title></head><body><p>{}</p></body></html>", escape(&page.title), escape(&page.body))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Serves fixture pages for urls under the base.
pub struct MockFetcher {
    pages: HashMap<String, String>,
}

impl MockFetcher {
    pub fn new(pages: &[MockPage], base: &str) -> Self {
        let base = base.trim_end_matches('/');
        Self { pages: pages.iter().map(|p| (format!("{base}{}", p.url), render_page(p))).collect() }
    }
}

impl PageFetcher for MockFetcher {
    fn fetch_text(&self, url: &str) -> Result<String, RetrievalError> {
        self.pages.get(url).map(|h| html_to_text(h)).ok_or_else(|| RetrievalError::Status { status: 404, url: url.to_string() })
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Deterministic reader and rewriter, dispatching on the prompt's instruction.
pub struct MockChat {
    reader: ReaderRule,
    rewrites: BTreeMap<String, String>,
    log: Arc<QueryLog>,
}

const ANSWER_SLOT: &str = " Answer:";
const QUESTION_SLOT: &str = "Question: ";

impl MockChat {
    pub fn new(fixture: &MockFixture, log: Arc<QueryLog>) -> Self {
        Self { reader: fixture.reader.clone(), rewrites: fixture.rewrites.clone(), log }
    }

    pub fn respond(&self, prompt: &str) -> Result<String, LlmError> {
        if prompt.starts_with(READER_INSTRUCTION) {
            self.read(prompt)
        } else if prompt.starts_with(REWRITER_OPEN_QA_INSTRUCTION) || prompt.starts_with(REWRITER_MULTI_CHOICE_INSTRUCTION) {
            Ok(self.rewrite(prompt))
        } else {
            Ok(self.reader.default.clone())
        }
    }

    fn rewrite(&self, prompt: &str) -> String {
        let body = prompt.strip_suffix(ANSWER_SLOT).unwrap_or(prompt);
        let x = body.rfind(QUESTION_SLOT).map_or(body, |i| &body[i + QUESTION_SLOT.len()..]);
        self.rewrites.get(x).cloned().unwrap_or_else(|| format!("{x}{SENTINEL}"))
    }

    /// Finds the known question the prompt ends with (longest wins) and the
    /// document region between the final `Question: ` and that question.
    fn locate<'p>(&self, prompt: &'p str) -> Option<(&ReaderAnswer, &'p str)> {
        let body = prompt.strip_suffix(ANSWER_SLOT)?;
        let (question, answer) = self
            .reader
            .answers
            .iter()
            .filter(|(q, _)| body.ends_with(q.as_str()))
            .max_by_key(|(q, _)| q.len())?;
        let before = &body[..body.len() - question.len()];
        let docs = before.rfind(QUESTION_SLOT).map_or("", |i| &before[i + QUESTION_SLOT.len()..]);
        Some((answer, docs))
    }

    fn extract(&self, prompt: &str) -> String {
        let Some((answer, docs)) = self.locate(prompt) else { return self.reader.default.clone() };
        let docs = docs.to_lowercase();
        let found = match answer {
            ReaderAnswer::Golds(golds) => golds
                .iter()
                .filter(|g| !g.trim().is_empty() && docs.contains(&g.to_lowercase()))
                .max_by_key(|g| g.len())
                .cloned(),
            ReaderAnswer::Evidence { answer, evidence } => {
                evidence.iter().any(|e| !e.is_empty() && docs.contains(&e.to_lowercase())).then(|| answer.clone())
            }
        };
        found.map_or_else(|| self.reader.default.clone(), |a| format!("{a}{SENTINEL}"))
    }

    fn read(&self, prompt: &str) -> Result<String, LlmError> {
        match self.reader.behavior {
            ReaderBehavior::Extractive => Ok(self.extract(prompt)),
            ReaderBehavior::Scripted => {
                let h = prompt_hash(prompt);
                match self.reader.scripted.get(&h) {
                    Some(c) => Ok(c.clone()),
                    None if self.reader.strict => Err(LlmError::Mock(format!("no scripted completion for prompt hash {h}"))),
                    None => Ok(self.reader.default.clone()),
                }
            }
            ReaderBehavior::KeywordReward => {
                let keyword = self.reader.keyword.as_deref().unwrap_or_default().to_lowercase();
                let gated = !keyword.is_empty()
                    && self.log.last_for_current_thread().is_some_and(|q| terms(&q).contains(&keyword));
                Ok(if gated { self.extract(prompt) } else { self.reader.default.clone() })
            }
        }
    }
}

impl ChatModel for MockChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        self.respond(request.prompt())
    }
}

/// In-process mocks built from one fixture and sharing one query log.
pub struct MockServices {
    pub search: Arc<MockSearch>,
    pub fetcher: Arc<MockFetcher>,
    pub chat: Arc<MockChat>,
    pub log: Arc<QueryLog>,
}

impl MockServices {
    pub fn new(fixture: &MockFixture, base: &str) -> Self {
        let log = Arc::new(QueryLog::default());
        Self {
            search: Arc::new(MockSearch::new(fixture.pages.clone(), base, log.clone())),
            fetcher: Arc::new(MockFetcher::new(&fixture.pages, base)),
            chat: Arc::new(MockChat::new(fixture, log.clone())),
            log,
        }
    }
}

/// The mocks behind a local HTTP port.
pub struct MockServer {
    pub base_url: String,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
    fail_next: Arc<AtomicUsize>,
    requests: Arc<AtomicUsize>,
    log: Arc<QueryLog>,
}

struct ServerState {
    services: MockServices,
    pages: HashMap<String, String>,
    api_key: Option<String>,
    fail_next: Arc<AtomicUsize>,
    requests: Arc<AtomicUsize>,
}

#[derive(Deserialize)]
struct WireRequest {
    messages: Vec<crate::llm::Message>,
}

impl MockServer {
    /// Binds 127.0.0.1 on an ephemeral port. With `api_key` set, search and
    /// chat requests must present it (X-API-Key or bearer) or get 401.
    pub fn start(fixture: &MockFixture, api_key: Option<String>) -> std::io::Result<Self> {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?);
        let port = server.server_addr().to_ip().map(|a| a.port()).ok_or_else(|| std::io::Error::other("no ip address"))?;
        let base_url = format!("http://127.0.0.1:{port}");
        let fail_next = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(AtomicUsize::new(0));
        let state = ServerState {
            services: MockServices::new(fixture, &base_url),
            pages: fixture.pages.iter().map(|p| (p.url.clone(), render_page(p))).collect(),
            api_key,
            fail_next: fail_next.clone(),
            requests: requests.clone(),
        };
        let log = state.services.log.clone();
        let srv = server.clone();
        let handle = thread::spawn(move || {
            for req in srv.incoming_requests() {
                state.handle(req);
            }
        });
        Ok(Self { base_url, server, handle: Some(handle), fail_next, requests, log })
    }

    pub fn search_endpoint(&self) -> String {
        format!("{}/search", self.base_url)
    }

    pub fn chat_endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url)
    }

    /// The next `n` requests are answered with 429.
    pub fn fail_next(&self, n: usize) {
        self.fail_next.store(n, Ordering::SeqCst);
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn query_log(&self) -> Vec<String> {
        self.log.all()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn json_response(status: u16, body: String) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    tiny_http::Response::from_string(body).with_status_code(status).with_header(header)
}

fn error_body(message: &str) -> String {
    serde_json::json!({ "error": { "message": message } }).to_string()
}

impl ServerState {
    fn authorized(&self, req: &tiny_http::Request) -> bool {
        let Some(key) = &self.api_key else { return true };
        req.headers().iter().any(|h| {
            let v = h.value.as_str();
            (h.field.equiv("X-API-Key") && v == key) || (h.field.equiv("Authorization") && v.strip_prefix("Bearer ") == Some(key))
        })
    }

    fn handle(&self, mut req: tiny_http::Request) {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let pending = self.fail_next.load(Ordering::SeqCst);
        if pending > 0 {
            self.fail_next.store(pending - 1, Ordering::SeqCst);
            let _ = req.respond(json_response(429, error_body("rate limited")));
            return;
        }
        let full = req.url().to_string();
        let (path, query) = full.split_once('?').unwrap_or((&full, ""));
        let resp = match (req.method(), path) {
            (tiny_http::Method::Get, "/search") if !self.authorized(&req) => json_response(401, error_body("invalid api key")),
            (tiny_http::Method::Get, "/search") => self.search(query),
            (tiny_http::Method::Post, "/v1/chat/completions") if !self.authorized(&req) => {
                json_response(401, error_body("invalid api key"))
            }
            (tiny_http::Method::Post, "/v1/chat/completions") => {
                let mut body = String::new();
                if req.as_reader().read_to_string(&mut body).is_err() {
                    json_response(400, error_body("unreadable body"))
                } else {
                    self.chat(&body)
                }
            }
            (tiny_http::Method::Get, p) => match self.pages.get(p) {
                Some(html) => {
                    let header = tiny_http::Header::from_bytes("Content-Type", "text/html; charset=utf-8").expect("static header");
                    tiny_http::Response::from_string(html.clone()).with_header(header)
                }
                None => json_response(404, error_body("not found")),
            },
            _ => json_response(405, error_body("method not allowed")),
        };
        let _ = req.respond(resp);
    }

    fn search(&self, query: &str) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
        let params: HashMap<String, String> = url::form_urlencoded::parse(query.as_bytes()).into_owned().collect();
        let q = params.get("q").cloned().unwrap_or_default();
        let count = params.get("count").and_then(|c| c.parse().ok()).unwrap_or(5);
        match self.services.search.search(&q, count) {
            Ok(hits) => json_response(200, serde_json::json!({ "results": hits }).to_string()),
            Err(e) => json_response(400, error_body(&e.to_string())),
        }
    }

    fn chat(&self, body: &str) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
        let Ok(req) = serde_json::from_str::<WireRequest>(body) else { return json_response(400, error_body("malformed request")) };
        let prompt = req.messages.first().map_or("", |m| m.content.as_str());
        match self.services.chat.respond(prompt) {
            Ok(text) => json_response(
                200,
                serde_json::json!({ "choices": [{ "index": 0, "message": { "role": "assistant", "content": text } }] }).to_string(),
            ),
            Err(e) => json_response(500, error_body(&e.to_string())),
        }
    }
}
