//! Allocation-only core of the rewrite-retrieve-read toolkit.
//!
//! Everything here is a pure computation over owned buffers: answer scoring,
//! BM25 chunk ranking, prompt rendering and parsing, the compact sequence
//! policy used as the trainable query rewriter, and the reinforcement-learning
//! math (reward composition, KL shaping, GAE, clipped PPO losses) together with
//! the warm-up and PPO training loops. IO, HTTP and file formats live in the
//! `rrr` companion crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bm25;
mod math;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod prompt;
pub mod rl;
pub mod train;
pub mod vocab;

pub use metrics::{ScoreTriple, TaskKind};
pub use policy::{Decode, PolicyParams, Rollout, ValueParams};
pub use rl::TrainConfig;
pub use vocab::{TokenId, Vocab};
