//! Command-line entry points. Exit codes: 0 success, 1 runtime failure,
//! 2 invalid input or missing prerequisite.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rrr_core::policy::ModelShape;
use rrr_core::train::{train_ppo, train_warmup, warmup_nll};
use rrr_core::{PolicyParams, TokenId, Vocab};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Config, RetrievalKind, CONFIG_KEYS_HELP};
use crate::data::{load_dataset, load_pseudo_data, save_pseudo_data, write_jsonl};
use crate::mock::{MockFixture, MockServer};
use crate::pipeline::{collect_pseudo_data, make_env, run_dataset, tokenize_pairs, PipelineError, PipelineMode, RunReport, RunSettings};

#[derive(Debug, Parser)]
#[command(name = "rrr", version, about = "Rewrite-retrieve-read QA: evaluation, pseudo-data collection, warm-up and PPO training")]
pub struct Cli {
    /// Seed for every stochastic component; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RetrievalArg {
    Snippet,
    Bm25,
}

impl From<RetrievalArg> for RetrievalKind {
    fn from(r: RetrievalArg) -> Self {
        match r {
            RetrievalArg::Snippet => RetrievalKind::Snippet,
            RetrievalArg::Bm25 => RetrievalKind::Bm25,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate one pipeline configuration; writes report.json and records.jsonl into --out.
    #[command(after_help = CONFIG_KEYS_HELP)]
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// direct_reader, retrieve_then_read, frozen_rewriter or trained_rewriter.
        #[arg(long, value_parser = parse_mode)]
        mode: PipelineMode,
        /// Overrides the config's `retrieval` key.
        #[arg(long, value_enum)]
        retrieval: Option<RetrievalArg>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rewriter checkpoint, required by trained_rewriter.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the config's `parallelism` key.
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Run the frozen LLM rewriter and keep (question, rewrite) pairs answered exactly right.
    #[command(name = "collect-pseudo", after_help = CONFIG_KEYS_HELP)]
    CollectPseudo {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Pseudo-pair JSONL file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        retrieval: Option<RetrievalArg>,
    },
    /// Supervised warm-up of a fresh rewriter on pseudo pairs.
    #[command(after_help = CONFIG_KEYS_HELP)]
    Warmup {
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to write; the loss curve goes to <out>.warmup.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// PPO fine-tuning of a warmed-up rewriter against reader feedback.
    #[command(name = "ppo-train", after_help = CONFIG_KEYS_HELP)]
    PpoTrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Warm-up checkpoint to start from.
        #[arg(long)]
        init: PathBuf,
        /// Checkpoint to write; per-iteration logs go to <out>.train.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        retrieval: Option<RetrievalArg>,
    },
    /// Side-by-side table of finished eval runs.
    Report {
        /// Output directories of earlier eval runs.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
    /// Serve a mock fixture over HTTP on an ephemeral local port until killed.
    #[command(name = "mock-serve")]
    MockServe {
        #[arg(long)]
        fixture: PathBuf,
        /// Require this key on search and chat requests.
        #[arg(long)]
        api_key: Option<String>,
    },
}

fn parse_mode(s: &str) -> Result<PipelineMode, String> {
    s.parse()
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Invalid(m) | CliError::Runtime(m) => m,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("missing {what}: {}", path.display())))
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<Config, CliError> {
    require(path, "config file")?;
    let mut cfg = Config::load(path).map_err(invalid)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dataset_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Eval { dataset, mode, retrieval, config, out, checkpoint, parallelism } => {
            let cfg = load_config(&config, cli.seed)?;
            let report = eval(&dataset, mode, retrieval.map(Into::into), &cfg, &out, checkpoint.as_deref(), parallelism)?;
            print!("{}", render_table(&[(out.display().to_string(), report)]));
            Ok(())
        }
        Command::CollectPseudo { dataset, config, out, retrieval } => {
            let cfg = load_config(&config, cli.seed)?;
            let n = collect(&dataset, &cfg, retrieval.map(Into::into), &out)?;
            println!("wrote {n} pseudo pairs to {}", out.display());
            Ok(())
        }
        Command::Warmup { pseudo, config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let (initial, last) = warmup(&pseudo, &cfg, &out)?;
            println!("warm-up loss {initial:.4} -> {last:.4}; checkpoint {}", out.display());
            Ok(())
        }
        Command::PpoTrain { dataset, config, init, out, retrieval } => {
            let cfg = load_config(&config, cli.seed)?;
            let (first, last) = ppo(&dataset, &cfg, &init, &out, retrieval.map(Into::into))?;
            println!("mean reward {first:.4} (first iteration) -> {last:.4} (last); checkpoint {}", out.display());
            Ok(())
        }
        Command::Report { runs } => {
            let mut loaded = Vec::new();
            for dir in &runs {
                let path = dir.join("report.json");
                require(&path, "run report")?;
                let text = fs::read_to_string(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
                let report: RunReport = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
                loaded.push((dir.display().to_string(), report));
            }
            print!("{}", render_table(&loaded));
            Ok(())
        }
        Command::MockServe { fixture, api_key } => {
            require(&fixture, "fixture")?;
            let f = MockFixture::load(&fixture).map_err(invalid)?;
            let server = MockServer::start(&f, api_key).map_err(runtime)?;
            println!("mock server listening on {}", server.base_url);
            println!("search: {}", server.search_endpoint());
            println!("chat:   {}", server.chat_endpoint());
            let _ = std::io::stdout().flush();
            loop {
                std::thread::park();
            }
        }
    }
}

pub fn eval(
    dataset: &Path,
    mode: PipelineMode,
    retrieval: Option<RetrievalKind>,
    cfg: &Config,
    out: &Path,
    checkpoint: Option<&Path>,
    parallelism: Option<usize>,
) -> Result<RunReport, CliError> {
    require(dataset, "dataset")?;
    let samples = load_dataset(dataset, cfg.task_kind().map_err(invalid)?).map_err(invalid)?;
    if samples.is_empty() {
        return Err(CliError::Invalid(format!("dataset {} has no samples", dataset.display())));
    }
    let ckpt = match (mode, checkpoint) {
        (PipelineMode::TrainedRewriter, None) => return Err(CliError::Invalid("trained_rewriter needs --checkpoint".into())),
        (_, Some(p)) => {
            require(p, "checkpoint")?;
            Some(Checkpoint::load(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?)
        }
        _ => None,
    };
    let retrieval = retrieval.unwrap_or(cfg.retrieval);
    let components = cfg.components(retrieval, ckpt).map_err(invalid)?;
    let retrieval_name = cfg.retrieval_mode(retrieval).name().to_string();
    let settings = RunSettings {
        dataset_id: dataset_id(dataset),
        config_hash: cfg.hash(&[mode.name(), &retrieval_name]),
        retrieval: retrieval_name,
        parallelism: parallelism.unwrap_or(cfg.parallelism),
        max_failure_fraction: cfg.max_failure_fraction,
    };
    let result = run_dataset(&samples, mode, &components, &settings);
    let (report, failure) = match result {
        Ok(r) => (r, None),
        Err(PipelineError::TooManyFailures { failed, total, allowed, partial }) => {
            (*partial, Some(format!("aborted: {failed} of {total} samples failed (allowed fraction {allowed})")))
        }
        Err(e) => return Err(runtime(e)),
    };
    write_report(out, &report)?;
    match failure {
        Some(m) => Err(CliError::Runtime(m)),
        None => Ok(report),
    }
}

pub fn write_report(out: &Path, report: &RunReport) -> Result<(), CliError> {
    let io = |e: &dyn std::fmt::Display| CliError::Runtime(format!("{}: {e}", out.display()));
    fs::create_dir_all(out).map_err(|e| io(&e))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(out.join("report.json"), json + "\n").map_err(|e| io(&e))?;
    write_jsonl(&out.join("records.jsonl"), &report.records).map_err(runtime)
}

fn collect(dataset: &Path, cfg: &Config, retrieval: Option<RetrievalKind>, out: &Path) -> Result<usize, CliError> {
    require(dataset, "dataset")?;
    let samples = load_dataset(dataset, cfg.task_kind().map_err(invalid)?).map_err(invalid)?;
    if samples.is_empty() {
        return Err(CliError::Invalid(format!("dataset {} has no samples", dataset.display())));
    }
    let retrieval = retrieval.unwrap_or(cfg.retrieval);
    let components = cfg.components(retrieval, None).map_err(invalid)?;
    let retrieval_name = cfg.retrieval_mode(retrieval).name().to_string();
    let settings = RunSettings {
        dataset_id: dataset_id(dataset),
        config_hash: cfg.hash(&["collect-pseudo", &retrieval_name]),
        retrieval: retrieval_name,
        parallelism: cfg.parallelism,
        max_failure_fraction: cfg.max_failure_fraction,
    };
    let (pairs, _) = collect_pseudo_data(&samples, &components, &settings).map_err(runtime)?;
    if pairs.is_empty() {
        eprintln!("warning: no sample was answered correctly; pseudo file is empty");
    }
    save_pseudo_data(&pairs, out).map_err(runtime)?;
    Ok(pairs.len())
}

#[derive(Serialize)]
struct WarmupLine {
    epoch: usize,
    loss: f64,
}

fn warmup(pseudo: &Path, cfg: &Config, out: &Path) -> Result<(f64, f64), CliError> {
    require(pseudo, "pseudo-data file")?;
    let pairs = load_pseudo_data(pseudo).map_err(invalid)?;
    if pairs.is_empty() {
        return Err(CliError::Invalid(format!("pseudo-data file {} is empty", pseudo.display())));
    }
    let vocab = Vocab::build(pairs.iter().flat_map(|p| [p.original_question.as_str(), p.rewrite.as_str()]));
    let tc = cfg.train_config();
    let tokens = tokenize_pairs(&pairs, &vocab, tc.max_len);
    let shape = ModelShape { vocab_size: vocab.len(), dim: tc.hidden_dim, bos: vocab.bos(), eos: vocab.eos() };
    let mut policy = PolicyParams::new(shape, tc.seed);
    let curve = train_warmup(&mut policy, &tokens, &tc).map_err(runtime)?;
    let final_loss = warmup_nll(&policy, &tokens, tc.max_len).map_err(runtime)?;
    let lines: Vec<WarmupLine> = curve.iter().enumerate().map(|(epoch, &loss)| WarmupLine { epoch, loss }).collect();
    write_jsonl(&sibling(out, "warmup.jsonl"), &lines).map_err(runtime)?;
    Checkpoint { vocab, max_len: tc.max_len, policy, value: None }.save(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    Ok((curve.first().copied().unwrap_or(final_loss), final_loss))
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize)]
struct TrainLine {
    iter: usize,
    mean_reward: f64,
    mean_em: f64,
    mean_f1: f64,
    mean_kl: f64,
    policy_loss: f64,
    value_loss: f64,
    clip_fraction: f64,
    episodes: usize,
    skipped: usize,
}

fn ppo(dataset: &Path, cfg: &Config, init: &Path, out: &Path, retrieval: Option<RetrievalKind>) -> Result<(f64, f64), CliError> {
    require(dataset, "dataset")?;
    require(init, "warm-up checkpoint")?;
    let samples = load_dataset(dataset, cfg.task_kind().map_err(invalid)?).map_err(invalid)?;
    let ckpt = Checkpoint::load(init).map_err(|e| invalid(format!("{}: {e}", init.display())))?;
    let tc = cfg.train_config();
    let inputs: Vec<Vec<TokenId>> = samples.iter().map(|s| ckpt.vocab.encode(&s.pipeline_text())).collect();
    let (kept, inputs): (Vec<_>, Vec<_>) = samples.into_iter().zip(inputs).filter(|(_, x)| !x.is_empty()).unzip();
    if kept.is_empty() {
        return Err(CliError::Invalid(format!("dataset {} has no usable samples", dataset.display())));
    }
    let components = cfg.components(retrieval.unwrap_or(cfg.retrieval), None).map_err(invalid)?;
    let env = make_env(&components, &kept, &ckpt.vocab, &tc);
    let log_path = sibling(out, "train.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| runtime(format!("{}: {e}", log_path.display())))?;
    let mut io_error: Option<String> = None;
    let mut policy = ckpt.policy.clone();
    let every = cfg.train.checkpoint_every;
    let outcome = train_ppo(&mut policy, &inputs, env, &tc, |entry, p, v| {
        let line = TrainLine {
            iter: entry.iter,
            mean_reward: entry.mean_reward,
            mean_em: entry.mean_em,
            mean_f1: entry.mean_f1,
            mean_kl: entry.mean_kl,
            policy_loss: entry.policy_loss,
            value_loss: entry.value_loss,
            clip_fraction: entry.clip_fraction,
            episodes: entry.episodes,
            skipped: entry.skipped,
        };
        let json = serde_json::to_string(&line).expect("log line serializes");
        if let Err(e) = writeln!(log, "{json}") {
            io_error.get_or_insert(e.to_string());
        }
        log::info!("iter {} reward {:.4} kl {:.4}", entry.iter, entry.mean_reward, entry.mean_kl);
        if every > 0 && (entry.iter + 1) % every == 0 {
            let snap = Checkpoint { vocab: ckpt.vocab.clone(), max_len: ckpt.max_len, policy: p.clone(), value: Some(v.clone()) };
            if let Err(e) = snap.save(&sibling(out, &format!("iter{}", entry.iter + 1))) {
                io_error.get_or_insert(e.to_string());
            }
        }
    })
    .map_err(runtime)?;
    if let Some(e) = io_error {
        return Err(CliError::Runtime(format!("writing training artifacts: {e}")));
    }
    Checkpoint { vocab: ckpt.vocab, max_len: ckpt.max_len, policy, value: Some(outcome.value) }
        .save(out)
        .map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let first = outcome.log.first().map_or(0.0, |l| l.mean_reward);
    let last = outcome.log.last().map_or(0.0, |l| l.mean_reward);
    Ok((first, last))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Metrics as rows, one column per run.
pub fn render_table(runs: &[(String, RunReport)]) -> String {
    let header: Vec<String> = runs.iter().map(|(label, r)| format!("{label} [{} / {}]", r.mode, r.retrieval)).collect();
    let rows: [(&str, Vec<String>); 4] = [
        ("EM", runs.iter().map(|(_, r)| pct(Some(r.aggregates.em))).collect()),
        ("F1", runs.iter().map(|(_, r)| pct(Some(r.aggregates.f1))).collect()),
        ("Hit", runs.iter().map(|(_, r)| pct(r.aggregates.hit_rate)).collect()),
        ("Samples", runs.iter().map(|(_, r)| format!("{} ({} failed)", r.aggregates.samples, r.aggregates.failed)).collect()),
    ];
    let widths: Vec<usize> = (0..runs.len())
        .map(|i| rows.iter().map(|(_, v)| v[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<8}", "");
    for (h, w) in header.iter().zip(&widths) {
        let _ = write!(out, " | {h:>w$}");
    }
    out.push('\n');
    for (name, vals) in &rows {
        let _ = write!(out, "{name:<8}");
        for (v, w) in vals.iter().zip(&widths) {
            let _ = write!(out, " | {v:>w$}");
        }
        out.push('\n');
    }
    out
}
