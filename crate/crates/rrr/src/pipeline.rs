//! The four evaluation configurations, pseudo-data collection and the reward
//! environment used by PPO.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use rrr_core::policy::{sample_sequence, ModelError};
use rrr_core::prompt::{build_reader_prompt, build_rewriter_prompt, parse_answer, parse_queries, Demonstrations};
use rrr_core::rl::task_reward;
use rrr_core::train::{EnvReward, TokenPair};
use rrr_core::{metrics, Decode, PolicyParams, ScoreTriple, TaskKind, TokenId, TrainConfig, Vocab};
use serde::{Deserialize, Serialize};

use crate::data::{PredictionRecord, PseudoPair, QASample};
use crate::llm::{ChatModel, ChatRequest, LlmError};
use crate::retrieval::{Document, RetrievalError, Retriever};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    DirectReader,
    RetrieveThenRead,
    FrozenRewriter,
    TrainedRewriter,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 4] =
        [PipelineMode::DirectReader, PipelineMode::RetrieveThenRead, PipelineMode::FrozenRewriter, PipelineMode::TrainedRewriter];

    pub fn name(self) -> &'static str {
        match self {
            PipelineMode::DirectReader => "direct_reader",
            PipelineMode::RetrieveThenRead => "retrieve_then_read",
            PipelineMode::FrozenRewriter => "frozen_rewriter",
            PipelineMode::TrainedRewriter => "trained_rewriter",
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            format!("unknown mode {s:?}; expected one of {}", Self::ALL.map(|m| m.name()).join(", "))
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("mode {0} needs a {1}")]
    Missing(PipelineMode, &'static str),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("llm: {0}")]
    Llm(#[from] LlmError),
    #[error("rewriter model: {0}")]
    Model(#[from] ModelError),
    #[error("reward: {0}")]
    Reward(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample index {0} out of range")]
    BadIndex(usize),
    #[error("{failed} of {total} samples failed, above the allowed fraction {allowed}")]
    TooManyFailures { failed: usize, total: usize, allowed: f64, partial: Box<RunReport> },
}

/// A warm-started or RL-trained policy used as the rewriter.
#[derive(Debug, Clone)]
pub struct TrainedRewriter {
    pub policy: PolicyParams,
    pub vocab: Vocab,
    pub max_len: usize,
}

impl TrainedRewriter {
    pub fn rewrite(&self, question: &str) -> Result<String, ModelError> {
        let x = self.vocab.encode(question);
        let rollout = sample_sequence(&self.policy, None, &x, Decode::Greedy, self.max_len)?;
        Ok(self.vocab.decode(&rollout.tokens))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ChatSettings {
    fn default() -> Self {
        Self { model: "gpt-3.5-turbo".into(), temperature: 0.0, max_tokens: 256 }
    }
}

/// Everything a run may need; unused parts stay `None`.
pub struct Components {
    pub reader: Arc<dyn ChatModel>,
    pub retriever: Option<Retriever>,
    pub llm_rewriter: Option<Arc<dyn ChatModel>>,
    pub trained_rewriter: Option<TrainedRewriter>,
    pub demos: Demonstrations,
    pub chat: ChatSettings,
}

struct Outcome {
    rewrites: Vec<String>,
    docs: Option<Vec<Document>>,
    raw: String,
    answer: String,
    scores: ScoreTriple,
}

impl Components {
    fn ask(&self, model: &dyn ChatModel, prompt: String) -> Result<String, LlmError> {
        model.complete(&ChatRequest::single(&self.chat.model, prompt, self.chat.temperature, self.chat.max_tokens))
    }

    fn retriever(&self, mode: PipelineMode) -> Result<&Retriever, PipelineError> {
        self.retriever.as_ref().ok_or(PipelineError::Missing(mode, "retriever"))
    }

    fn queries(&self, sample: &QASample, x: &str, mode: PipelineMode) -> Result<Option<Vec<String>>, PipelineError> {
        Ok(match mode {
            PipelineMode::DirectReader => None,
            PipelineMode::RetrieveThenRead => Some(vec![x.to_string()]),
            PipelineMode::FrozenRewriter => {
                let llm = self.llm_rewriter.as_ref().ok_or(PipelineError::Missing(mode, "rewriter LLM"))?;
                let prompt = build_rewriter_prompt(x, sample.task_kind, self.demos.rewriter(sample.task_kind));
                Some(parse_queries(&self.ask(llm.as_ref(), prompt)?))
            }
            PipelineMode::TrainedRewriter => {
                let rw = self.trained_rewriter.as_ref().ok_or(PipelineError::Missing(mode, "trained rewriter checkpoint"))?;
                let q = rw.rewrite(x)?;
                Some(if q.trim().is_empty() { Vec::new() } else { vec![q] })
            }
        })
    }

    /// Retrieves for `queries` (none means no retrieval), then reads with
    /// the original question.
    fn read(&self, sample: &QASample, x: &str, queries: &[String], mode: PipelineMode) -> Result<Outcome, PipelineError> {
        let docs = if queries.is_empty() {
            None
        } else {
            let r = self.retriever(mode)?.retrieve(queries)?;
            if let Some(w) = &r.warning {
                log::warn!("sample {}: {w}", sample.id);
            }
            Some(r.docs)
        };
        let texts: Vec<&str> = docs.iter().flatten().map(|d| d.text.as_str()).collect();
        let raw = self.ask(self.reader.as_ref(), build_reader_prompt(x, &texts, &self.demos.reader))?;
        let answer = parse_answer(&raw);
        let scores = metrics::score(&answer, &sample.gold_answers, sample.task_kind, docs.as_ref().map(|_| texts.as_slice()));
        Ok(Outcome { rewrites: queries.to_vec(), docs, raw, answer, scores })
    }

    fn run(&self, sample: &QASample, mode: PipelineMode) -> Result<Outcome, PipelineError> {
        let x = sample.pipeline_text();
        let queries = self.queries(sample, &x, mode)?.unwrap_or_default();
        self.read(sample, &x, &queries, mode)
    }

    /// Scores one rewrite of `sample`: retrieval with the rewrite as the only
    /// query, then reading. An empty rewrite retrieves nothing, which counts
    /// as a miss.
    pub fn env_reward(&self, sample: &QASample, rewrite: &str, cfg: &TrainConfig) -> Result<(f64, ScoreTriple), PipelineError> {
        let x = sample.pipeline_text();
        let mut scores = if rewrite.trim().is_empty() {
            self.read(sample, &x, &[], PipelineMode::TrainedRewriter)?.scores
        } else {
            self.read(sample, &x, &[rewrite.to_string()], PipelineMode::TrainedRewriter)?.scores
        };
        if scores.hit.is_none() {
            scores.hit = Some(-1.0);
        }
        let r = task_reward(&scores, sample.task_kind, cfg).map_err(|e| PipelineError::Reward(e.to_string()))?;
        Ok((r, scores))
    }
}

/// Runs one sample; failures land in the record instead of propagating.
pub fn run_sample(sample: &QASample, mode: PipelineMode, components: &Components) -> PredictionRecord {
    match components.run(sample, mode) {
        Ok(o) => PredictionRecord {
            sample_id: sample.id.clone(),
            rewrites: o.rewrites,
            doc_ids: o.docs.iter().flatten().map(|d| d.id.clone()).collect(),
            raw_output: o.raw,
            answer: o.answer,
            em: o.scores.em,
            f1: o.scores.f1,
            hit: o.scores.hit,
            error: None,
        },
        Err(e) => {
            log::warn!("sample {} failed: {e}", sample.id);
            PredictionRecord {
                sample_id: sample.id.clone(),
                rewrites: Vec::new(),
                doc_ids: Vec::new(),
                raw_output: String::new(),
                answer: String::new(),
                em: 0.0,
                f1: 0.0,
                hit: None,
                error: Some(e.to_string()),
            }
        }
    }
}

/// Percentages over all records; `hit_rate` covers records that retrieved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub em: f64,
    pub f1: f64,
    pub hit_rate: Option<f64>,
    pub samples: usize,
    pub failed: usize,
}

impl Aggregates {
    pub fn from_records(records: &[PredictionRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let hits: Vec<f64> = records.iter().filter_map(|r| r.hit).collect();
        Self {
            em: 100.0 * records.iter().map(|r| r.em).sum::<f64>() / n,
            f1: 100.0 * records.iter().map(|r| r.f1).sum::<f64>() / n,
            hit_rate: (!hits.is_empty()).then(|| 100.0 * hits.iter().filter(|&&h| h > 0.0).count() as f64 / hits.len() as f64),
            samples: records.len(),
            failed: records.iter().filter(|r| r.error.is_some()).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: PipelineMode,
    pub dataset: String,
    pub retrieval: String,
    /// Unix seconds.
    pub timestamp: u64,
    pub config_hash: String,
    pub aggregates: Aggregates,
    #[serde(skip)]
    pub records: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub dataset_id: String,
    pub retrieval: String,
    pub config_hash: String,
    pub parallelism: usize,
    /// Abort once more than this fraction of the dataset has failed.
    pub max_failure_fraction: f64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Runs every sample on a pool of `parallelism` workers. Records keep
/// dataset order.
pub fn run_dataset(
    dataset: &[QASample],
    mode: PipelineMode,
    components: &Components,
    settings: &RunSettings,
) -> Result<RunReport, PipelineError> {
    if dataset.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.parallelism.max(1))
        .build()
        .map_err(|e| PipelineError::Reward(format!("thread pool: {e}")))?;
    let total = dataset.len();
    let allowed = (settings.max_failure_fraction * total as f64).floor() as usize;
    let wave = settings.parallelism.max(1) * 4;
    let mut records = Vec::with_capacity(total);
    let mut failed = 0;
    let report = |records: Vec<PredictionRecord>| RunReport {
        mode,
        dataset: settings.dataset_id.clone(),
        retrieval: settings.retrieval.clone(),
        timestamp: unix_now(),
        config_hash: settings.config_hash.clone(),
        aggregates: Aggregates::from_records(&records),
        records,
    };
    for chunk in dataset.chunks(wave) {
        let out: Vec<PredictionRecord> = pool.install(|| chunk.par_iter().map(|s| run_sample(s, mode, components)).collect());
        failed += out.iter().filter(|r| r.error.is_some()).count();
        records.extend(out);
        if failed > allowed {
            return Err(PipelineError::TooManyFailures {
                failed,
                total,
                allowed: settings.max_failure_fraction,
                partial: Box::new(report(records)),
            });
        }
    }
    Ok(report(records))
}

/// Frozen-rewriter run keeping (question, rewrite) exactly where the answer
/// was exactly right and at least one query was issued. Multiple queries are
/// stored joined by `"; "`.
pub fn collect_pseudo_data(
    dataset: &[QASample],
    components: &Components,
    settings: &RunSettings,
) -> Result<(Vec<PseudoPair>, RunReport), PipelineError> {
    let report = run_dataset(dataset, PipelineMode::FrozenRewriter, components, settings)?;
    let pairs: Vec<PseudoPair> = dataset
        .iter()
        .zip(&report.records)
        .filter(|(_, r)| r.error.is_none() && r.em == 1.0 && !r.rewrites.is_empty())
        .map(|(s, r)| PseudoPair { sample_id: s.id.clone(), original_question: s.pipeline_text(), rewrite: r.rewrites.join("; ") })
        .collect();
    if pairs.is_empty() {
        log::warn!("no sample was answered correctly; the pseudo set is empty");
    }
    Ok((pairs, report))
}

/// The PPO environment over `samples`: decodes the policy's tokens with
/// `vocab` and scores the rewrite.
pub fn make_env<'a>(
    components: &'a Components,
    samples: &'a [QASample],
    vocab: &'a Vocab,
    cfg: &'a TrainConfig,
) -> impl FnMut(usize, &[TokenId]) -> Result<EnvReward, PipelineError> + 'a {
    move |i, tokens| {
        let sample = samples.get(i).ok_or(PipelineError::BadIndex(i))?;
        let (r_lm, s) = components.env_reward(sample, &vocab.decode(tokens), cfg)?;
        Ok(EnvReward { r_lm, em: s.em, f1: s.f1 })
    }
}

/// Encodes pseudo pairs for warm-up. Rewrites longer than `max_len` tokens
/// are cut and re-terminated; pairs whose question has no known token are
/// dropped.
pub fn tokenize_pairs(pairs: &[PseudoPair], vocab: &Vocab, max_len: usize) -> Vec<TokenPair> {
    pairs
        .iter()
        .map(|p| {
            let mut rewrite = vocab.encode_target(&p.rewrite);
            if rewrite.len() > max_len {
                rewrite.truncate(max_len.saturating_sub(1));
                rewrite.push(vocab.eos());
            }
            TokenPair { question: vocab.encode(&p.original_question), rewrite }
        })
        .filter(|p| !p.question.is_empty())
        .collect()
}

/// Config/CLI spelling of a task kind.
pub fn task_kind_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::OpenQa => "open_qa",
        TaskKind::MultiChoice => "multi_choice",
    }
}
