//! Okapi BM25 over fixed-size overlapping word chunks.
//!
//! Pages are split into windows of `chunk_size` whitespace words advancing by
//! `chunk_stride`; every chunk of every page forms the scoring corpus, and the
//! `keep_top` best chunks against the query survive.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use crate::math::ln;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    pub chunk_size: usize,
    pub chunk_stride: usize,
    pub keep_top: usize,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75, chunk_size: 100, chunk_stride: 50, keep_top: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvalidParams(pub &'static str);

impl fmt::Display for InvalidParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid BM25 parameters: {}", self.0)
    }
}

impl core::error::Error for InvalidParams {}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), InvalidParams> {
        if !(self.k1.is_finite() && self.k1 > 0.0) {
            return Err(InvalidParams("k1 must be positive"));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(InvalidParams("b must lie in [0, 1]"));
        }
        if self.chunk_size == 0 || self.chunk_stride == 0 || self.keep_top == 0 {
            return Err(InvalidParams("chunk_size, chunk_stride and keep_top must be positive"));
        }
        if self.chunk_stride > self.chunk_size {
            return Err(InvalidParams("chunk_stride must not exceed chunk_size"));
        }
        Ok(())
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Collection statistics over the candidate chunk set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub doc_freq: BTreeMap<String, usize>,
    pub avg_len: f64,
}

impl CorpusStats {
    pub fn from_docs<D: AsRef<[String]>>(docs: &[D]) -> Self {
        let mut doc_freq = BTreeMap::new();
        let mut total = 0usize;
        for doc in docs {
            let doc = doc.as_ref();
            total += doc.len();
            let unique: BTreeSet<&String> = doc.iter().collect();
            for t in unique {
                *doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let avg_len = if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 };
        Self { n_docs: docs.len(), doc_freq, avg_len }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        let n = self.n_docs as f64;
        ln(1.0 + (n - df + 0.5) / (df + 0.5))
    }
}

/// BM25 score of one document. Each distinct query term contributes once.
pub fn bm25_score(query: &[String], doc: &[String], stats: &CorpusStats, k1: f64, b: f64) -> f64 {
    if doc.is_empty() {
        return 0.0;
    }
    let terms: BTreeSet<&str> = query.iter().map(String::as_str).collect();
    let dl = doc.len() as f64;
    let norm = if stats.avg_len > 0.0 { dl / stats.avg_len } else { 1.0 };
    let mut score = 0.0;
    for term in terms {
        let tf = doc.iter().filter(|t| t.as_str() == term).count() as f64;
        if tf == 0.0 {
            continue;
        }
        score += stats.idf(term) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm));
    }
    score
}

/// Word windows covering `0..len`; the last window always ends at `len`.
pub fn chunk_ranges(len: usize, size: usize, stride: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    if len == 0 || size == 0 || stride == 0 {
        return out;
    }
    let mut start = 0;
    loop {
        let end = (start + size).min(len);
        out.push(start..end);
        if end == len {
            break;
        }
        start += stride;
    }
    out
}

/// A chunk of page text selected by BM25.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredChunk {
    pub page: usize,
    pub words: Range<usize>,
    pub text: String,
    pub score: f64,
}

/// Chunks every page, scores all chunks against `query` and keeps the best
/// `params.keep_top`. Ties keep earlier pages and earlier offsets first.
pub fn select_chunks<P: AsRef<str>>(query: &str, pages: &[P], params: &Bm25Params) -> Vec<ScoredChunk> {
    let mut chunks = Vec::new();
    for (page_idx, page) in pages.iter().enumerate() {
        let words: Vec<&str> = page.as_ref().split_whitespace().collect();
        for range in chunk_ranges(words.len(), params.chunk_size, params.chunk_stride) {
            let text = words[range.clone()].join(" ");
            chunks.push((page_idx, range, text));
        }
    }
    let tokens: Vec<Vec<String>> = chunks.iter().map(|(_, _, t)| tokenize(t)).collect();
    let stats = CorpusStats::from_docs(&tokens);
    let query_tokens = tokenize(query);
    let mut scored: Vec<ScoredChunk> = chunks
        .into_iter()
        .zip(&tokens)
        .map(|((page, words, text), toks)| ScoredChunk {
            page,
            words,
            text,
            score: bm25_score(&query_tokens, toks, &stats, params.k1, params.b),
        })
        .collect();
    // stable: equal scores keep page/offset order
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    scored.truncate(params.keep_top);
    scored
}
