//! Prompt templates for the reader and the frozen LLM rewriter, and the
//! parsers for their `**`-terminated completions.

use alloc::string::String;
use alloc::vec::Vec;

use crate::metrics::TaskKind;

/// Completion terminator every template asks for.
pub const SENTINEL: &str = "**";

pub const READER_INSTRUCTION: &str = "Answer the question in the following format, end the answer with '**'.";
pub const REWRITER_OPEN_QA_INSTRUCTION: &str = "Think step by step to answer this question, and provide search engine queries for knowledge that you need. Split the queries with ';' and end the queries with '**'.";
pub const REWRITER_MULTI_CHOICE_INSTRUCTION: &str =
    "Provide a better search query for web search engine to answer the given question, end the queries with '**'.";

/// Instruction, then demonstrations space-separated, then the input slot.
fn render(instruction: &str, demos: &[String], input: &str) -> String {
    let mut out = String::from(instruction);
    for demo in demos {
        out.push(' ');
        out.push_str(demo);
    }
    out.push_str(" Question: ");
    out.push_str(input);
    out.push_str(" Answer:");
    out
}

/// Reader prompt. With no documents this is the plain reader template;
/// otherwise documents are newline-joined ahead of the question.
pub fn build_reader_prompt<D: AsRef<str>>(question: &str, docs: &[D], demos: &[String]) -> String {
    if docs.is_empty() {
        return render(READER_INSTRUCTION, demos, question);
    }
    let mut input = String::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            input.push('\n');
        }
        input.push_str(d.as_ref());
    }
    input.push(' ');
    input.push_str(question);
    render(READER_INSTRUCTION, demos, &input)
}

pub fn build_rewriter_prompt(question: &str, kind: TaskKind, demos: &[String]) -> String {
    let instruction = match kind {
        TaskKind::OpenQa => REWRITER_OPEN_QA_INSTRUCTION,
        TaskKind::MultiChoice => REWRITER_MULTI_CHOICE_INSTRUCTION,
    };
    render(instruction, demos, question)
}

/// Text before the first sentinel, trimmed. Without a sentinel the whole
/// completion is used.
pub fn parse_answer(raw: &str) -> String {
    let head = match raw.find(SENTINEL) {
        Some(i) => &raw[..i],
        None => raw,
    };
    String::from(head.trim())
}

/// `;`-separated queries before the sentinel; empty entries dropped.
pub fn parse_queries(raw: &str) -> Vec<String> {
    let head = match raw.find(SENTINEL) {
        Some(i) => &raw[..i],
        None => raw,
    };
    head.split(';').map(str::trim).filter(|q| !q.is_empty()).map(String::from).collect()
}

/// Pinned demonstrations, one set per template.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Demonstrations {
    pub reader: Vec<String>,
    pub rewriter_open_qa: Vec<String>,
    pub rewriter_multi_choice: Vec<String>,
}

impl Demonstrations {
    pub fn rewriter(&self, kind: TaskKind) -> &[String] {
        match kind {
            TaskKind::OpenQa => &self.rewriter_open_qa,
            TaskKind::MultiChoice => &self.rewriter_multi_choice,
        }
    }

    /// The built-in fixture set used when no demonstration file is given.
    pub fn builtin() -> Self {
        let s = |t: &str| String::from(t);
        Self {
            reader: alloc::vec![
                s("Question: What is the capital of France? Answer: Paris**"),
                s("Question: Who wrote the novel 1984? Answer: George Orwell**"),
            ],
            rewriter_open_qa: alloc::vec![s(
                "Question: What profession do Nicholas Ray and Elia Kazan have in common? Answer: Nicholas Ray profession; Elia Kazan profession**"
            )],
            rewriter_multi_choice: alloc::vec![s(
                "Question: Which gas makes up most of the Earth's atmosphere? A. Oxygen B. Nitrogen C. Argon D. Carbon dioxide Answer: composition of Earth's atmosphere by gas**"
            )],
        }
    }
}
