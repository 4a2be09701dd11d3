//! Binary checkpoints: a JSON header with the vocabulary, then named f64
//! blocks for the policy and optionally the value network.
//!
//! Layout (little endian): magic `RRRCKPT\0`, u32 header length, header
//! JSON, u32 block count, then per block: u32 name length, name, u32 rows,
//! u32 cols, rows·cols f64.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rrr_core::policy::{Matrix, ModelShape, ParamSet};
use rrr_core::{PolicyParams, ValueParams, Vocab};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 8] = b"RRRCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    vocab_size: usize,
    dim: usize,
    max_len: usize,
    vocab: Vec<String>,
}

/// A trained rewriter and, after PPO, its value network.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub max_len: usize,
    pub policy: PolicyParams,
    pub value: Option<ValueParams>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_blocks<P: ParamSet>(out: &mut Vec<u8>, prefix: &str, params: &P) -> Result<(), CheckpointError> {
    for (name, m) in params.blocks() {
        let full = format!("{prefix}.{name}");
        put_u32(out, full.len())?;
        out.extend_from_slice(full.as_bytes());
        put_u32(out, m.rows)?;
        put_u32(out, m.cols)?;
        for x in &m.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let shape = self.policy.shape();
        let header = Header {
            version: VERSION,
            vocab_size: shape.vocab_size,
            dim: shape.dim,
            max_len: self.max_len,
            vocab: self.vocab.tokens().to_vec(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, header.len())?;
        out.extend_from_slice(&header);
        let count = self.policy.blocks().len() + self.value.as_ref().map_or(0, |v| v.blocks().len());
        put_u32(&mut out, count)?;
        put_blocks(&mut out, "policy", &self.policy)?;
        if let Some(v) = &self.value {
            put_blocks(&mut out, "value", v)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let header_len = read_u32(&mut r)? as usize;
        let header: Header = serde_json::from_slice(take(&mut r, header_len)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if header.version != VERSION {
            return Err(CheckpointError::Version(header.version));
        }
        let vocab = Vocab::from_tokens(header.vocab).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if vocab.len() != header.vocab_size || header.dim == 0 {
            return Err(CheckpointError::Corrupt("header shape disagrees with vocabulary".into()));
        }
        let mut blocks: HashMap<String, Matrix> = HashMap::new();
        for _ in 0..read_u32(&mut r)? {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec()).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| CheckpointError::Corrupt("block too large".into()))?;
            let data = take(&mut r, n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if blocks.insert(name.clone(), Matrix { rows, cols, data }).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate block {name}")));
            }
        }
        if !r.is_empty() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.len())));
        }
        let shape = ModelShape { vocab_size: vocab.len(), dim: header.dim, bos: vocab.bos(), eos: vocab.eos() };
        let mut policy = PolicyParams::new(shape, 0);
        fill(&mut policy, "policy", &mut blocks)?;
        let value = if blocks.keys().any(|k| k.starts_with("value.")) {
            let mut v = ValueParams::from_policy(&policy);
            fill(&mut v, "value", &mut blocks)?;
            Some(v)
        } else {
            None
        };
        if let Some(extra) = blocks.keys().next() {
            return Err(CheckpointError::Corrupt(format!("unexpected block {extra}")));
        }
        Ok(Self { vocab, max_len: header.max_len, policy, value })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CheckpointError> {
    let b = take(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if r.len() < n {
        return Err(CheckpointError::Corrupt("truncated".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn fill<P: ParamSet>(params: &mut P, prefix: &str, blocks: &mut HashMap<String, Matrix>) -> Result<(), CheckpointError> {
    for (name, m) in params.blocks_mut() {
        let key = format!("{prefix}.{name}");
        let b = blocks.remove(&key).ok_or_else(|| CheckpointError::Corrupt(format!("missing block {key}")))?;
        if (b.rows, b.cols) != (m.rows, m.cols) {
            return Err(CheckpointError::Corrupt(format!("block {key} is {}x{}, expected {}x{}", b.rows, b.cols, m.rows, m.cols)));
        }
        *m = b;
    }
    Ok(())
}
