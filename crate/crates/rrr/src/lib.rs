//! Rewrite-retrieve-read question answering: dataset IO, search and chat
//! clients, offline mocks, the pipeline, training drivers and the CLI.

#![forbid(unsafe_code)]

pub mod data;
pub mod llm;
pub mod mock;
pub mod retrieval;
pub mod retry;
pub mod pipeline;
pub mod checkpoint;
pub mod config;
pub mod cli;
