//! JSONL datasets, pseudo pairs and prediction records.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rrr_core::TaskKind;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed JSON: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Invalid { path: PathBuf, line: usize, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QASample {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub choices: Option<Vec<Choice>>,
    pub task_kind: TaskKind,
}

impl QASample {
    /// The text fed to rewriters and the reader. Multi-choice items append
    /// every option as `LABEL. text` on the same line.
    pub fn pipeline_text(&self) -> String {
        match &self.choices {
            Some(choices) if self.task_kind == TaskKind::MultiChoice => {
                let mut out = self.question.clone();
                for c in choices {
                    out.push(' ');
                    out.push_str(&c.label);
                    out.push_str(". ");
                    out.push_str(&c.text);
                }
                out
            }
            _ => self.question.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawSample {
    id: Option<String>,
    question: String,
    answers: Vec<String>,
    #[serde(default)]
    choices: Option<Vec<Choice>>,
}

fn validate(raw: RawSample, index: usize, kind: TaskKind) -> Result<QASample, String> {
    if raw.answers.is_empty() {
        return Err("answers must be non-empty".into());
    }
    if raw.question.trim().is_empty() {
        return Err("question must be non-empty".into());
    }
    let choices = match kind {
        TaskKind::OpenQa => None,
        TaskKind::MultiChoice => {
            let choices = raw.choices.ok_or("multi_choice sample has no choices")?;
            if choices.is_empty() {
                return Err("multi_choice sample has no choices".into());
            }
            for (i, c) in choices.iter().enumerate() {
                let expected = (b'A' + i as u8) as char;
                if i >= 26 || c.label != expected.to_string() {
                    return Err(format!("choice labels must run A, B, C, ... in order; got {:?} at position {i}", c.label));
                }
            }
            let labels: BTreeSet<char> = choices.iter().filter_map(|c| c.label.chars().next()).collect();
            for a in &raw.answers {
                let letters = rrr_core::metrics::option_letters(a);
                if letters.is_empty() || letters.iter().any(|l| !labels.contains(l)) {
                    return Err(format!("answer {a:?} does not name existing option labels"));
                }
            }
            Some(choices)
        }
    };
    Ok(QASample {
        id: raw.id.unwrap_or_else(|| format!("{index:06}")),
        question: raw.question,
        gold_answers: raw.answers,
        choices,
        task_kind: kind,
    })
}

/// Loads and validates a JSONL dataset. Samples without an `id` get their
/// zero-padded line index. Blank lines are skipped.
pub fn load_dataset(path: &Path, kind: TaskKind) -> Result<Vec<QASample>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample =
            serde_json::from_str(&line).map_err(|source| DataError::Parse { path: path.to_path_buf(), line: i + 1, source })?;
        let sample = validate(raw, i, kind).map_err(|reason| DataError::Invalid { path: path.to_path_buf(), line: i + 1, reason })?;
        out.push(sample);
    }
    Ok(out)
}

/// A (question, rewrite) pair that led the pipeline to a correct answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoPair {
    pub sample_id: String,
    pub original_question: String,
    pub rewrite: String,
}

/// Outcome of running one sample through the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub rewrites: Vec<String>,
    pub doc_ids: Vec<String>,
    pub raw_output: String,
    pub answer: String,
    pub em: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("plain data serializes");
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DataError::Parse { path: path.to_path_buf(), line: i + 1, source })?);
    }
    Ok(out)
}

pub fn save_pseudo_data(pairs: &[PseudoPair], path: &Path) -> Result<(), DataError> {
    for (i, p) in pairs.iter().enumerate() {
        if p.rewrite.trim().is_empty() {
            return Err(DataError::Invalid { path: path.to_path_buf(), line: i + 1, reason: "empty rewrite".into() });
        }
    }
    write_jsonl(path, pairs)
}

pub fn load_pseudo_data(path: &Path) -> Result<Vec<PseudoPair>, DataError> {
    let pairs: Vec<PseudoPair> = read_jsonl(path)?;
    for (i, p) in pairs.iter().enumerate() {
        if p.rewrite.trim().is_empty() {
            return Err(DataError::Invalid { path: path.to_path_buf(), line: i + 1, reason: "empty rewrite".into() });
        }
    }
    Ok(pairs)
}
