//! TOML run configuration and component wiring.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rrr_core::bm25::Bm25Params;
use rrr_core::prompt::Demonstrations;
use rrr_core::{TaskKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::llm::{ChatModel, HttpChatClient};
use crate::mock::{MockFixture, MockServices, DEFAULT_BASE};
use crate::pipeline::{ChatSettings, Components, TrainedRewriter};
use crate::retrieval::{HttpPageFetcher, HttpSearchClient, PageFetcher, RetrievalMode, Retriever, SearchEngine};
use crate::retry::Backoff;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalKind {
    Snippet,
    Bm25,
}

/// Keys of the `[train]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub kl_beta: f64,
    pub value_coef: f64,
    pub f1_coef: f64,
    pub hit_coef: f64,
    pub ppo_epochs: usize,
    pub minibatch_size: usize,
    pub rollout_batch: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub iterations: usize,
    pub normalize_advantages: bool,
    pub max_len: usize,
    pub hidden_dim: usize,
    pub warmup_epochs: usize,
    pub warmup_learning_rate: f64,
    /// Write an intermediate checkpoint every this many PPO iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            clip_eps: d.clip_eps,
            gamma: d.gamma,
            gae_lambda: d.gae_lambda,
            kl_beta: d.kl_beta,
            value_coef: d.value_coef,
            f1_coef: d.f1_coef,
            hit_coef: d.hit_coef,
            ppo_epochs: d.ppo_epochs,
            minibatch_size: d.minibatch_size,
            rollout_batch: d.rollout_batch,
            learning_rate: d.learning_rate,
            max_grad_norm: d.max_grad_norm,
            iterations: d.iterations,
            normalize_advantages: d.normalize_advantages,
            max_len: d.max_len,
            hidden_dim: d.hidden_dim,
            warmup_epochs: d.warmup_epochs,
            warmup_learning_rate: d.warmup_learning_rate,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub task: String,
    pub retrieval: RetrievalKind,
    pub top_k: usize,
    /// `builtin`, `none`, or a JSON file of demonstrations.
    pub demos: String,
    /// When set, search, pages and the LLM are served by in-process mocks.
    pub mock_fixture: Option<PathBuf>,
    pub search_endpoint: Option<String>,
    pub search_key_header: String,
    pub llm_endpoint: Option<String>,
    pub llm_model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub requests_per_second: f64,
    pub max_retries: u32,
    pub parallelism: usize,
    pub fetch_parallelism: usize,
    pub politeness_ms: u64,
    pub page_byte_cap: usize,
    pub max_failure_fraction: f64,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub chunk_size: usize,
    pub chunk_stride: usize,
    pub keep_top: usize,
    pub seed: u64,
    pub train: TrainSection,
}

impl Default for Config {
    fn default() -> Self {
        let bm = Bm25Params::default();
        Self {
            task: "open_qa".into(),
            retrieval: RetrievalKind::Snippet,
            top_k: 5,
            demos: "builtin".into(),
            mock_fixture: None,
            search_endpoint: None,
            search_key_header: "X-API-Key".into(),
            llm_endpoint: None,
            llm_model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_tokens: 256,
            requests_per_second: 0.0,
            max_retries: 3,
            parallelism: 4,
            fetch_parallelism: 4,
            politeness_ms: 0,
            page_byte_cap: 2_000_000,
            max_failure_fraction: 0.5,
            bm25_k1: bm.k1,
            bm25_b: bm.b,
            chunk_size: bm.chunk_size,
            chunk_stride: bm.chunk_stride,
            keep_top: bm.keep_top,
            seed: 0,
            train: TrainSection::default(),
        }
    }
}

pub const CONFIG_KEYS_HELP: &str = "\
Config keys (TOML): task, retrieval, top_k, demos, mock_fixture, search_endpoint, search_key_header, \
llm_endpoint, llm_model, temperature, max_tokens, requests_per_second, max_retries, parallelism, \
fetch_parallelism, politeness_ms, page_byte_cap, max_failure_fraction, bm25_k1, bm25_b, chunk_size, \
chunk_stride, keep_top, seed; table [train]: clip_eps, gamma, gae_lambda, kl_beta, value_coef, f1_coef, \
hit_coef, ppo_epochs, minibatch_size, rollout_batch, learning_rate, max_grad_norm, iterations, \
normalize_advantages, max_len, hidden_dim, warmup_epochs, warmup_learning_rate, checkpoint_every. \
Environment: SEARCH_API_KEY and LLM_API_KEY are read only for live endpoints.";

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: Config = toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.mock_fixture = cfg.mock_fixture.map(|p| resolve(base, &p));
        if !matches!(cfg.demos.as_str(), "builtin" | "none") {
            cfg.demos = resolve(base, Path::new(&cfg.demos)).to_string_lossy().into_owned();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        self.task_kind()?;
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.parallelism == 0 || self.fetch_parallelism == 0 {
            return bad("parallelism and fetch_parallelism must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return bad("max_failure_fraction must lie in [0, 1]");
        }
        if self.temperature.is_nan() || self.temperature < 0.0 || self.max_tokens == 0 {
            return bad("temperature must be >= 0 and max_tokens > 0");
        }
        self.bm25_params().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config().validate().map_err(|f| ConfigError::Invalid(format!("train.{f}")))?;
        if self.train.hidden_dim == 0 {
            return bad("train.hidden_dim must be at least 1");
        }
        Ok(())
    }

    pub fn task_kind(&self) -> Result<TaskKind, ConfigError> {
        match self.task.as_str() {
            "open_qa" => Ok(TaskKind::OpenQa),
            "multi_choice" => Ok(TaskKind::MultiChoice),
            other => Err(ConfigError::Invalid(format!("task must be open_qa or multi_choice, got {other:?}"))),
        }
    }

    pub fn bm25_params(&self) -> Bm25Params {
        Bm25Params { k1: self.bm25_k1, b: self.bm25_b, chunk_size: self.chunk_size, chunk_stride: self.chunk_stride, keep_top: self.keep_top }
    }

    pub fn retrieval_mode(&self, kind: RetrievalKind) -> RetrievalMode {
        match kind {
            RetrievalKind::Snippet => RetrievalMode::Snippet,
            RetrievalKind::Bm25 => RetrievalMode::Bm25(self.bm25_params()),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            clip_eps: t.clip_eps,
            gamma: t.gamma,
            gae_lambda: t.gae_lambda,
            kl_beta: t.kl_beta,
            value_coef: t.value_coef,
            f1_coef: t.f1_coef,
            hit_coef: t.hit_coef,
            ppo_epochs: t.ppo_epochs,
            minibatch_size: t.minibatch_size,
            rollout_batch: t.rollout_batch,
            learning_rate: t.learning_rate,
            max_grad_norm: t.max_grad_norm,
            iterations: t.iterations,
            seed: self.seed,
            normalize_advantages: t.normalize_advantages,
            max_len: t.max_len,
            hidden_dim: t.hidden_dim,
            warmup_epochs: t.warmup_epochs,
            warmup_learning_rate: t.warmup_learning_rate,
        }
    }

    pub fn demonstrations(&self) -> Result<Demonstrations, ConfigError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct DemoFile {
            #[serde(default)]
            reader: Vec<String>,
            #[serde(default)]
            rewriter_open_qa: Vec<String>,
            #[serde(default)]
            rewriter_multi_choice: Vec<String>,
        }
        match self.demos.as_str() {
            "builtin" => Ok(Demonstrations::builtin()),
            "none" => Ok(Demonstrations::default()),
            path => {
                let path = PathBuf::from(path);
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                let f: DemoFile = serde_json::from_str(&text).map_err(|e| ConfigError::Parse { path, message: e.to_string() })?;
                Ok(Demonstrations { reader: f.reader, rewriter_open_qa: f.rewriter_open_qa, rewriter_multi_choice: f.rewriter_multi_choice })
            }
        }
    }

    /// Stable digest of the effective configuration plus run selectors.
    pub fn hash(&self, extra: &[&str]) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        for e in extra {
            h.update([0u8]);
            h.update(e.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn backoff(&self) -> Backoff {
        Backoff { max_retries: self.max_retries, ..Backoff::default() }
    }

    /// Wires the reader, retriever and rewriters. `checkpoint` supplies the
    /// trained rewriter.
    pub fn components(&self, retrieval: RetrievalKind, checkpoint: Option<Checkpoint>) -> Result<Components, ConfigError> {
        let (engine, fetcher, chat): (Arc<dyn SearchEngine>, Arc<dyn PageFetcher>, Arc<dyn ChatModel>) = match &self.mock_fixture {
            Some(path) => {
                let fixture = MockFixture::load(path).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                let m = MockServices::new(&fixture, DEFAULT_BASE);
                (m.search, m.fetcher, m.chat)
            }
            None => {
                let search = self.search_endpoint.clone().ok_or_else(|| ConfigError::Invalid("search_endpoint or mock_fixture is required".into()))?;
                let llm = self.llm_endpoint.clone().ok_or_else(|| ConfigError::Invalid("llm_endpoint or mock_fixture is required".into()))?;
                let engine = HttpSearchClient::new(search, std::env::var("SEARCH_API_KEY").ok(), self.backoff())
                    .with_key_header(self.search_key_header.clone());
                let chat = HttpChatClient::new(llm, std::env::var("LLM_API_KEY").ok(), self.backoff(), self.requests_per_second);
                (Arc::new(engine), Arc::new(HttpPageFetcher::new(self.page_byte_cap)), Arc::new(chat))
            }
        };
        let mut retriever = Retriever::new(engine, Some(fetcher), self.retrieval_mode(retrieval), self.top_k);
        retriever.fetch_parallelism = self.fetch_parallelism;
        retriever.politeness = Duration::from_millis(self.politeness_ms);
        Ok(Components {
            reader: chat.clone(),
            retriever: Some(retriever),
            llm_rewriter: Some(chat),
            trained_rewriter: checkpoint.map(|c| TrainedRewriter { policy: c.policy, vocab: c.vocab, max_len: c.max_len }),
            demos: self.demonstrations()?,
            chat: ChatSettings { model: self.llm_model.clone(), temperature: self.temperature, max_tokens: self.max_tokens },
        })
    }
}
