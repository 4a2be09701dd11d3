//! Web-search retrieval in two content modes: concatenated result snippets,
//! or full pages fetched, chunked and filtered with BM25.

use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rrr_core::bm25::{select_chunks, Bm25Params};
use scraper::{ElementRef, Html, Node};
use serde::{Deserialize, Serialize};

use crate::retry::{with_backoff, Attempt, Backoff};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("search query is empty")]
    EmptyQuery,
    #[error("top_k must be at least 1")]
    ZeroTopK,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status} from {url}")]
    Status { status: u16, url: String },
    #[error("malformed search response: {0}")]
    Malformed(String),
    #[error("invalid url {0:?}")]
    BadUrl(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub url: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub snippet: String,
}

/// A unit of reader context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub source_url: String,
    pub text: String,
    /// BM25 score; 0 for snippets.
    pub score: f64,
}

pub trait SearchEngine: Send + Sync {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<SearchHit>, RetrievalError>;
}

/// Fetches a page and returns its visible text.
pub trait PageFetcher: Send + Sync {
    fn fetch_text(&self, url: &str) -> Result<String, RetrievalError>;
}

fn check_query(query: &str, top_k: usize) -> Result<(), RetrievalError> {
    if query.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    if top_k == 0 {
        return Err(RetrievalError::ZeroTopK);
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct SearchResponse {
    results: Vec<SearchHit>,
}

fn transient_status(status: u16) -> bool {
    status == 429 || status >= 500
}

/// Client for a search endpoint speaking
/// `GET ?q=..&count=..` → `{"results":[{"url","title","snippet"}]}`.
pub struct HttpSearchClient {
    http: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    key_header: String,
    backoff: Backoff,
}

impl HttpSearchClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, backoff: Backoff) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .expect("HTTP client builds with static settings");
        Self { http, endpoint: endpoint.into(), api_key, key_header: "X-API-Key".into(), backoff }
    }

    pub fn with_key_header(mut self, header: impl Into<String>) -> Self {
        self.key_header = header.into();
        self
    }
}

impl SearchEngine for HttpSearchClient {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<SearchHit>, RetrievalError> {
        check_query(query, top_k)?;
        let url = url::Url::parse_with_params(&self.endpoint, &[("q", query), ("count", &top_k.to_string())])
            .map_err(|_| RetrievalError::BadUrl(self.endpoint.clone()))?;
        let body = with_backoff(&self.backoff, |_| {
            let mut req = self.http.get(url.clone());
            if let Some(key) = &self.api_key {
                req = req.header(self.key_header.as_str(), key);
            }
            match req.send() {
                Err(e) => Attempt::Transient(RetrievalError::Transport(e.to_string())),
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    if resp.status().is_success() {
                        match resp.text() {
                            Ok(t) => Attempt::Done(t),
                            Err(e) => Attempt::Transient(RetrievalError::Transport(e.to_string())),
                        }
                    } else {
                        let err = RetrievalError::Status { status, url: self.endpoint.clone() };
                        if transient_status(status) {
                            Attempt::Transient(err)
                        } else {
                            Attempt::Fatal(err)
                        }
                    }
                }
            }
        })?;
        let parsed: SearchResponse = serde_json::from_str(&body).map_err(|e| RetrievalError::Malformed(e.to_string()))?;
        if parsed.results.iter().any(|h| h.url.is_empty()) {
            return Err(RetrievalError::Malformed("result without url".into()));
        }
        let mut hits = parsed.results;
        hits.truncate(top_k);
        Ok(hits)
    }
}

pub const USER_AGENT: &str = concat!("rrr-fetch/", env!("CARGO_PKG_VERSION"));

/// Plain GET page fetcher with a byte cap.
pub struct HttpPageFetcher {
    http: reqwest::blocking::Client,
    byte_cap: usize,
}

impl HttpPageFetcher {
    pub fn new(byte_cap: usize) -> Self {
        let http = reqwest::blocking::Client::builder()
            .user_agent(USER_AGENT)
            .timeout(Duration::from_secs(20))
            .build()
            .expect("HTTP client builds with static settings");
        Self { http, byte_cap }
    }
}

impl PageFetcher for HttpPageFetcher {
    fn fetch_text(&self, url: &str) -> Result<String, RetrievalError> {
        let parsed = url::Url::parse(url).map_err(|_| RetrievalError::BadUrl(url.to_string()))?;
        let resp = self.http.get(parsed).send().map_err(|e| RetrievalError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(RetrievalError::Status { status: resp.status().as_u16(), url: url.to_string() });
        }
        let is_html = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .is_none_or(|ct| ct.contains("html"));
        if !is_html {
            return Ok(String::new());
        }
        let mut bytes = Vec::new();
        resp.take(self.byte_cap as u64).read_to_end(&mut bytes).map_err(|e| RetrievalError::Transport(e.to_string()))?;
        Ok(html_to_text(&String::from_utf8_lossy(&bytes)))
    }
}

const BLOCK_TAGS: &[&str] = &[
    "address", "article", "aside", "blockquote", "br", "dd", "div", "dl", "dt", "figcaption", "footer", "form", "h1", "h2", "h3",
    "h4", "h5", "h6", "header", "hr", "li", "main", "nav", "ol", "p", "pre", "section", "table", "td", "th", "title", "tr", "ul",
];
const HIDDEN_TAGS: &[&str] = &["script", "style", "noscript", "template", "iframe", "svg"];

fn walk(el: ElementRef<'_>, out: &mut String) {
    for child in el.children() {
        match child.value() {
            Node::Text(t) => out.push_str(t),
            Node::Element(e) => {
                let name = e.name();
                if HIDDEN_TAGS.contains(&name) {
                    continue;
                }
                let block = BLOCK_TAGS.contains(&name);
                if block {
                    out.push(' ');
                }
                if let Some(child_el) = ElementRef::wrap(child) {
                    walk(child_el, out);
                }
                if block {
                    out.push(' ');
                }
            }
            _ => {}
        }
    }
}

/// Visible text of an HTML document with whitespace collapsed.
pub fn html_to_text(html: &str) -> String {
    let doc = Html::parse_document(html);
    let mut raw = String::new();
    walk(doc.root_element(), &mut raw);
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Content mode for the reader context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RetrievalMode {
    Snippet,
    Bm25(Bm25Params),
}

impl RetrievalMode {
    pub fn name(&self) -> &'static str {
        match self {
            RetrievalMode::Snippet => "snippet",
            RetrievalMode::Bm25(_) => "bm25",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Retrieval {
    pub docs: Vec<Document>,
    /// Set when every page fetch failed in BM25 mode.
    pub warning: Option<String>,
}

/// Search plus optional page fetching. Shareable across worker threads.
pub struct Retriever {
    pub engine: Arc<dyn SearchEngine>,
    pub fetcher: Option<Arc<dyn PageFetcher>>,
    pub mode: RetrievalMode,
    pub top_k: usize,
    pub fetch_parallelism: usize,
    /// Minimum gap between two fetches against the same host.
    pub politeness: Duration,
    hosts: Mutex<HashMap<String, Instant>>,
}

impl Retriever {
    pub fn new(engine: Arc<dyn SearchEngine>, fetcher: Option<Arc<dyn PageFetcher>>, mode: RetrievalMode, top_k: usize) -> Self {
        Self { engine, fetcher, mode, top_k, fetch_parallelism: 4, politeness: Duration::ZERO, hosts: Mutex::new(HashMap::new()) }
    }

    pub fn retrieve<Q: AsRef<str>>(&self, queries: &[Q]) -> Result<Retrieval, RetrievalError> {
        match self.mode {
            RetrievalMode::Snippet => Ok(Retrieval { docs: self.retrieve_snippets(queries)?, warning: None }),
            RetrievalMode::Bm25(params) => self.retrieve_fullpage_bm25(queries, &params),
        }
    }

    fn search_all<Q: AsRef<str>>(&self, queries: &[Q]) -> Result<Vec<SearchHit>, RetrievalError> {
        if queries.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let mut seen = HashSet::new();
        let mut hits = Vec::new();
        for q in queries {
            for hit in self.engine.search(q.as_ref(), self.top_k)? {
                if seen.insert(hit.url.clone()) {
                    hits.push(hit);
                }
            }
        }
        Ok(hits)
    }

    /// One document per distinct url, in query then hit order.
    pub fn retrieve_snippets<Q: AsRef<str>>(&self, queries: &[Q]) -> Result<Vec<Document>, RetrievalError> {
        Ok(self
            .search_all(queries)?
            .into_iter()
            .filter(|h| !h.snippet.trim().is_empty())
            .map(|h| Document { id: h.url.clone(), source_url: h.url, text: h.snippet.trim().to_string(), score: 0.0 })
            .collect())
    }

    pub fn retrieve_fullpage_bm25<Q: AsRef<str>>(&self, queries: &[Q], params: &Bm25Params) -> Result<Retrieval, RetrievalError> {
        let hits = self.search_all(queries)?;
        if hits.is_empty() {
            return Ok(Retrieval::default());
        }
        let fetcher = self.fetcher.as_ref().ok_or_else(|| RetrievalError::Transport("no page fetcher configured".into()))?;
        let pages = self.fetch_all(fetcher.as_ref(), &hits);
        let fetched: Vec<(usize, String)> = pages
            .into_iter()
            .enumerate()
            .filter_map(|(i, r)| match r {
                Ok(text) => Some((i, text)),
                Err(e) => {
                    log::warn!("skipping {}: {e}", hits[i].url);
                    None
                }
            })
            .collect();
        if fetched.is_empty() {
            return Ok(Retrieval { docs: Vec::new(), warning: Some(format!("all {} page fetches failed", hits.len())) });
        }
        let query = queries.iter().map(|q| q.as_ref()).collect::<Vec<_>>().join(" ");
        let texts: Vec<&str> = fetched.iter().map(|(_, t)| t.as_str()).collect();
        let docs = select_chunks(&query, &texts, params)
            .into_iter()
            .map(|c| {
                let url = &hits[fetched[c.page].0].url;
                Document { id: format!("{url}#{}-{}", c.words.start, c.words.end), source_url: url.clone(), text: c.text, score: c.score }
            })
            .collect();
        Ok(Retrieval { docs, warning: None })
    }

    /// Fetches pages with at most `fetch_parallelism` in flight; results come
    /// back in hit order.
    fn fetch_all(&self, fetcher: &dyn PageFetcher, hits: &[SearchHit]) -> Vec<Result<String, RetrievalError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<String, RetrievalError>>>> = hits.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.fetch_parallelism.clamp(1, hits.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= hits.len() {
                        break;
                    }
                    self.wait_for_host(&hits[i].url);
                    let r = fetcher.fetch_text(&hits[i].url);
                    *slots[i].lock().expect("slot poisoned") = Some(r);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().expect("slot poisoned").expect("every slot filled")).collect()
    }

    fn wait_for_host(&self, page: &str) {
        if self.politeness.is_zero() {
            return;
        }
        let host = url::Url::parse(page).ok().and_then(|u| u.host_str().map(str::to_string)).unwrap_or_default();
        let wait = {
            let mut hosts = self.hosts.lock().expect("host map poisoned");
            let now = Instant::now();
            let slot = hosts.get(&host).map_or(now, |t| (*t).max(now));
            hosts.insert(host, slot + self.politeness);
            slot - now
        };
        std::thread::sleep(wait);
    }
}
