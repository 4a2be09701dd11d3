//! Answer normalization and the scoring primitives shared by evaluation and
//! reward computation: exact match, token F1 and the retrieval hit indicator.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

/// Benchmark family a sample belongs to. Decides how answers are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    OpenQa,
    MultiChoice,
}

/// Per-sample scores. `hit` is only present when retrieval ran.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreTriple {
    pub em: f64,
    pub f1: f64,
    pub hit: Option<f64>,
}

/// Lowercase, drop ASCII punctuation, drop the articles "a", "an", "the" as
/// whole tokens and collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let mut out = String::with_capacity(stripped.len());
    for token in stripped.split_whitespace() {
        if matches!(token, "a" | "an" | "the") {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(token);
    }
    out
}

/// Option letters of a multi-choice answer such as `"C, A"`: split on commas
/// and whitespace, uppercase, keep single ASCII letters, sorted and unique.
pub fn option_letters(text: &str) -> Vec<char> {
    let mut letters: Vec<char> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()))
        .filter_map(|t| {
            let mut chars = t.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_alphabetic() => Some(c.to_ascii_uppercase()),
                _ => None,
            }
        })
        .collect();
    letters.sort_unstable();
    letters.dedup();
    letters
}

fn answer_tokens(text: &str, kind: TaskKind) -> Vec<String> {
    match kind {
        TaskKind::OpenQa => normalize_answer(text).split(' ').filter(|t| !t.is_empty()).map(String::from).collect(),
        TaskKind::MultiChoice => option_letters(text).into_iter().map(String::from).collect(),
    }
}

/// 1.0 when the prediction equals some gold answer after normalization (open
/// QA) or names the same set of option letters (multi-choice), else 0.0.
pub fn exact_match<S: AsRef<str>>(prediction: &str, golds: &[S], kind: TaskKind) -> f64 {
    let hit = match kind {
        TaskKind::OpenQa => {
            let p = normalize_answer(prediction);
            golds.iter().any(|g| normalize_answer(g.as_ref()) == p)
        }
        TaskKind::MultiChoice => {
            let p = option_letters(prediction);
            golds.iter().any(|g| option_letters(g.as_ref()) == p)
        }
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Token-level F1 between two token lists, overlap counted as a multiset
/// intersection. Both empty gives 1, exactly one empty gives 0.
pub fn token_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, isize> = BTreeMap::new();
    for t in gold {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    // 2PR/(P+R) simplified to a single rounding
    2.0 * overlap as f64 / (pred.len() + gold.len()) as f64
}

/// Maximum token F1 over all gold answers.
pub fn f1_score<S: AsRef<str>>(prediction: &str, golds: &[S], kind: TaskKind) -> f64 {
    let pred = answer_tokens(prediction, kind);
    golds
        .iter()
        .map(|g| token_f1(&pred, &answer_tokens(g.as_ref(), kind)))
        .fold(0.0, f64::max)
}

/// +1 when some normalized gold answer is a substring of the normalized,
/// concatenated document text; -1 otherwise (including no documents).
pub fn hit_indicator<S: AsRef<str>, D: AsRef<str>>(golds: &[S], docs: &[D]) -> f64 {
    if docs.is_empty() {
        return -1.0;
    }
    let mut joined = String::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            joined.push('\n');
        }
        joined.push_str(d.as_ref());
    }
    let haystack = normalize_answer(&joined);
    let found = golds.iter().any(|g| {
        let needle = normalize_answer(g.as_ref());
        !needle.is_empty() && haystack.contains(needle.as_str())
    });
    if found {
        1.0
    } else {
        -1.0
    }
}

/// Scores a prediction; `docs` is `Some` exactly when retrieval happened.
pub fn score<S: AsRef<str>, D: AsRef<str>>(
    prediction: &str,
    golds: &[S],
    kind: TaskKind,
    docs: Option<&[D]>,
) -> ScoreTriple {
    ScoreTriple {
        em: exact_match(prediction, golds, kind),
        f1: f1_score(prediction, golds, kind),
        hit: docs.map(|d| hit_indicator(golds, d)),
    }
}
