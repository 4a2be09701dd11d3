//! The trainable rewriter: a compact sequence-to-sequence policy with a
//! separate value network, exact reverse-mode gradients, sampling and
//! teacher-forced scoring.
//!
//! Architecture. The question is encoded as `tanh(W_e · mean(embed[x]) + b_e)`,
//! which seeds the hidden state of a gated recurrent decoder. At step `t` the
//! decoder consumes the previous token (BOS at `t = 0`) and the new hidden
//! state `h_{t+1}` represents the state `s_t = [x, y_<t]`. The policy reads
//! `h_{t+1}` through an output projection into logits over the vocabulary;
//! the value network is a structurally identical trunk with a scalar head.
//!
//! All arithmetic is `f64` so finite-difference checks stay tight.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::math::{exp, log_softmax, sigmoid, sqrt, tanh};
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    EmptyInput,
    OutOfVocab(TokenId),
    MissingEos,
    TooLong { len: usize, max: usize },
    LengthMismatch { expected: usize, got: usize },
    NonFinite,
    ShapeMismatch(&'static str),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::EmptyInput => write!(f, "input sequence is empty"),
            ModelError::OutOfVocab(id) => write!(f, "token id {id} is outside the vocabulary"),
            ModelError::MissingEos => write!(f, "target sequence does not end with EOS"),
            ModelError::TooLong { len, max } => write!(f, "sequence length {len} exceeds max_len {max}"),
            ModelError::LengthMismatch { expected, got } => {
                write!(f, "per-step length mismatch: expected {expected}, got {got}")
            }
            ModelError::NonFinite => write!(f, "non-finite value in forward pass"),
            ModelError::ShapeMismatch(name) => write!(f, "parameter block {name} has the wrong shape"),
        }
    }
}

impl core::error::Error for ModelError {}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub(crate) fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl RngCore) -> Self {
        let data = (0..rows * cols).map(|_| (2.0 * unit_f64(rng) - 1.0) * scale).collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out += M[rows] · x`
    fn matvec_add(&self, rows: Range<usize>, x: &[f64], out: &mut [f64]) {
        for (o, i) in out.iter_mut().zip(rows) {
            *o += dot(self.row(i), x);
        }
    }

    /// `out += M[rows]ᵀ · y`
    fn matvec_t_add(&self, rows: Range<usize>, y: &[f64], out: &mut [f64]) {
        for (&yi, i) in y.iter().zip(rows) {
            if yi != 0.0 {
                for (o, &m) in out.iter_mut().zip(self.row(i)) {
                    *o += m * yi;
                }
            }
        }
    }

    /// `M[rows] += a ⊗ b`
    fn outer_add(&mut self, rows: Range<usize>, a: &[f64], b: &[f64]) {
        for (&ai, i) in a.iter().zip(rows) {
            if ai != 0.0 {
                for (m, &bj) in self.row_mut(i).iter_mut().zip(b) {
                    *m += ai * bj;
                }
            }
        }
    }

    fn col_add(&mut self, rows: Range<usize>, a: &[f64]) {
        for (&ai, i) in a.iter().zip(rows) {
            self.data[i] += ai;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Named parameter blocks shared by the policy, value network and their
/// gradients.
pub trait ParamSet: Clone {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)>;
    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, b) in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }

    fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.data.iter().all(|x| x.is_finite()))
    }

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.data.len()).sum()
    }

    /// `self += scale · other`
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for (_, b) in self.blocks_mut() {
            b.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    fn sq_norm(&self) -> f64 {
        self.blocks().iter().flat_map(|(_, b)| b.data.iter()).map(|x| x * x).sum()
    }
}

/// Sizes and special-token ids a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub dim: usize,
    pub bos: TokenId,
    pub eos: TokenId,
}

/// Encoder plus recurrent decoder cell. Gate matrices stack the update,
/// reset and candidate rows in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub embed: Matrix,
    pub enc_w: Matrix,
    pub enc_b: Matrix,
    pub gate_x: Matrix,
    pub gate_h: Matrix,
    pub gate_b: Matrix,
}

struct EncodeCache {
    mean: Vec<f64>,
    ctx: Vec<f64>,
}

struct StepCache {
    token: TokenId,
    input: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    h: Vec<f64>,
}

impl Trunk {
    fn new(vocab_size: usize, dim: usize, rng: &mut impl RngCore) -> Self {
        let s = 1.0 / sqrt(dim as f64);
        Self {
            embed: Matrix::uniform(vocab_size, dim, 1.0, rng),
            enc_w: Matrix::uniform(dim, dim, s, rng),
            enc_b: Matrix::zeros(dim, 1),
            gate_x: Matrix::uniform(3 * dim, dim, s, rng),
            gate_h: Matrix::uniform(3 * dim, dim, s, rng),
            gate_b: Matrix::zeros(3 * dim, 1),
        }
    }

    fn dim(&self) -> usize {
        self.embed.cols
    }

    fn vocab_size(&self) -> usize {
        self.embed.rows
    }

    fn check_tokens(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        match ids.iter().find(|&&id| id as usize >= self.vocab_size()) {
            Some(&id) => Err(ModelError::OutOfVocab(id)),
            None => Ok(()),
        }
    }

    fn encode(&self, x: &[TokenId]) -> Result<EncodeCache, ModelError> {
        if x.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        self.check_tokens(x)?;
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for &id in x {
            for (m, &e) in mean.iter_mut().zip(self.embed.row(id as usize)) {
                *m += e;
            }
        }
        let inv = 1.0 / x.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut ctx = self.enc_b.data.clone();
        self.enc_w.matvec_add(0..d, &mean, &mut ctx);
        ctx.iter_mut().for_each(|c| *c = tanh(*c));
        Ok(EncodeCache { mean, ctx })
    }

    fn step(&self, h_prev: &[f64], token: TokenId) -> StepCache {
        let d = self.dim();
        let input = self.embed.row(token as usize).to_vec();
        let mut pre = self.gate_b.data.clone();
        self.gate_x.matvec_add(0..3 * d, &input, &mut pre);
        self.gate_h.matvec_add(0..2 * d, h_prev, &mut pre[..2 * d]);
        let z: Vec<f64> = pre[..d].iter().map(|&a| sigmoid(a)).collect();
        let r: Vec<f64> = pre[d..2 * d].iter().map(|&a| sigmoid(a)).collect();
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        self.gate_h.matvec_add(2 * d..3 * d, &rh, &mut pre[2 * d..]);
        let n: Vec<f64> = pre[2 * d..].iter().map(|&a| tanh(a)).collect();
        let h = (0..d).map(|i| (1.0 - z[i]) * n[i] + z[i] * h_prev[i]).collect();
        StepCache { token, input, h_prev: h_prev.to_vec(), z, r, n, h }
    }

    /// Hidden states for teacher-forced decoding of `targets`.
    fn unroll(&self, x: &[TokenId], targets: &[TokenId], bos: TokenId) -> Result<(EncodeCache, Vec<StepCache>), ModelError> {
        self.check_tokens(targets)?;
        let enc = self.encode(x)?;
        let mut steps: Vec<StepCache> = Vec::with_capacity(targets.len());
        for t in 0..targets.len() {
            let prev = if t == 0 { bos } else { targets[t - 1] };
            let h_prev = steps.last().map(|s| s.h.as_slice()).unwrap_or(&enc.ctx);
            let cache = self.step(h_prev, prev);
            steps.push(cache);
        }
        Ok((enc, steps))
    }

    /// Accumulates into `grads` given the loss gradient w.r.t. every decoder
    /// output state `h_{t+1}`.
    fn backward(&self, x: &[TokenId], enc: &EncodeCache, steps: &[StepCache], dh_out: &[Vec<f64>], grads: &mut Trunk) {
        let d = self.dim();
        let mut carry = vec![0.0; d];
        for (cache, dh_t) in steps.iter().zip(dh_out).rev() {
            let dh: Vec<f64> = carry.iter().zip(dh_t).map(|(a, b)| a + b).collect();
            let mut dh_prev: Vec<f64> = (0..d).map(|i| dh[i] * cache.z[i]).collect();
            let dn: Vec<f64> = (0..d).map(|i| dh[i] * (1.0 - cache.z[i])).collect();
            let dz: Vec<f64> = (0..d).map(|i| dh[i] * (cache.h_prev[i] - cache.n[i])).collect();
            let dan: Vec<f64> = (0..d).map(|i| dn[i] * (1.0 - cache.n[i] * cache.n[i])).collect();
            let daz: Vec<f64> = (0..d).map(|i| dz[i] * cache.z[i] * (1.0 - cache.z[i])).collect();
            let rh: Vec<f64> = (0..d).map(|i| cache.r[i] * cache.h_prev[i]).collect();

            let mut dx = vec![0.0; d];
            grads.gate_x.outer_add(2 * d..3 * d, &dan, &cache.input);
            grads.gate_h.outer_add(2 * d..3 * d, &dan, &rh);
            grads.gate_b.col_add(2 * d..3 * d, &dan);
            self.gate_x.matvec_t_add(2 * d..3 * d, &dan, &mut dx);
            let mut drh = vec![0.0; d];
            self.gate_h.matvec_t_add(2 * d..3 * d, &dan, &mut drh);
            let dar: Vec<f64> = (0..d).map(|i| drh[i] * cache.h_prev[i] * cache.r[i] * (1.0 - cache.r[i])).collect();
            for i in 0..d {
                dh_prev[i] += drh[i] * cache.r[i];
            }

            for (rows, da) in [(0..d, &daz), (d..2 * d, &dar)] {
                grads.gate_x.outer_add(rows.clone(), da, &cache.input);
                grads.gate_h.outer_add(rows.clone(), da, &cache.h_prev);
                grads.gate_b.col_add(rows.clone(), da);
                self.gate_x.matvec_t_add(rows.clone(), da, &mut dx);
                self.gate_h.matvec_t_add(rows, da, &mut dh_prev);
            }
            for (g, v) in grads.embed.row_mut(cache.token as usize).iter_mut().zip(&dx) {
                *g += v;
            }
            carry = dh_prev;
        }

        let da: Vec<f64> = (0..d).map(|i| carry[i] * (1.0 - enc.ctx[i] * enc.ctx[i])).collect();
        grads.enc_w.outer_add(0..d, &da, &enc.mean);
        grads.enc_b.col_add(0..d, &da);
        let mut dmean = vec![0.0; d];
        self.enc_w.matvec_t_add(0..d, &da, &mut dmean);
        let inv = 1.0 / x.len() as f64;
        for &id in x {
            for (g, v) in grads.embed.row_mut(id as usize).iter_mut().zip(&dmean) {
                *g += v * inv;
            }
        }
    }

    fn blocks<'a>(&'a self, out: &mut Vec<(&'static str, &'a Matrix)>) {
        out.extend([
            ("embed", &self.embed),
            ("enc_w", &self.enc_w),
            ("enc_b", &self.enc_b),
            ("gate_x", &self.gate_x),
            ("gate_h", &self.gate_h),
            ("gate_b", &self.gate_b),
        ]);
    }

    fn blocks_mut<'a>(&'a mut self, out: &mut Vec<(&'static str, &'a mut Matrix)>) {
        out.extend([
            ("embed", &mut self.embed),
            ("enc_w", &mut self.enc_w),
            ("enc_b", &mut self.enc_b),
            ("gate_x", &mut self.gate_x),
            ("gate_h", &mut self.gate_h),
            ("gate_b", &mut self.gate_b),
        ]);
    }
}

/// Policy parameters θ: the trunk plus an output projection onto the
/// vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub trunk: Trunk,
    pub out_w: Matrix,
    pub out_b: Matrix,
    pub bos: TokenId,
    pub eos: TokenId,
}

/// Value parameters φ: a trunk of the same shape plus a scalar head.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueParams {
    pub trunk: Trunk,
    pub head_w: Matrix,
    pub head_b: Matrix,
    pub bos: TokenId,
}

impl ParamSet for PolicyParams {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = Vec::with_capacity(8);
        self.trunk.blocks(&mut out);
        out.push(("out_w", &self.out_w));
        out.push(("out_b", &self.out_b));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = Vec::with_capacity(8);
        self.trunk.blocks_mut(&mut out);
        out.push(("out_w", &mut self.out_w));
        out.push(("out_b", &mut self.out_b));
        out
    }
}

impl ParamSet for ValueParams {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = Vec::with_capacity(8);
        self.trunk.blocks(&mut out);
        out.push(("head_w", &self.head_w));
        out.push(("head_b", &self.head_b));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = Vec::with_capacity(8);
        self.trunk.blocks_mut(&mut out);
        out.push(("head_w", &mut self.head_w));
        out.push(("head_b", &mut self.head_b));
        out
    }
}

/// How the next token is chosen during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decode {
    Greedy,
    Sample { seed: u64 },
}

/// One generated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Emitted tokens, EOS included when generation stopped on it.
    pub tokens: Vec<TokenId>,
    /// `log π_θ(a_t | s_t)` of each emitted token.
    pub logprobs: Vec<f64>,
    /// `V_φ(s_t)` recorded before each emission; zeros without a value net.
    pub values: Vec<f64>,
}

impl Rollout {
    pub fn ended_with_eos(&self, eos: TokenId) -> bool {
        self.tokens.last() == Some(&eos)
    }
}

/// Decoder state carried between [`PolicyParams::step_logits`] calls.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState(pub Vec<f64>);

impl PolicyParams {
    pub fn new(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Trunk::new(shape.vocab_size, shape.dim, &mut rng);
        let s = 1.0 / sqrt(shape.dim as f64);
        Self {
            trunk,
            out_w: Matrix::uniform(shape.vocab_size, shape.dim, s, &mut rng),
            out_b: Matrix::zeros(shape.vocab_size, 1),
            bos: shape.bos,
            eos: shape.eos,
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape { vocab_size: self.trunk.vocab_size(), dim: self.trunk.dim(), bos: self.bos, eos: self.eos }
    }

    /// Context vector for the question; it is also the initial decoder state.
    pub fn encode(&self, x: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        Ok(self.trunk.encode(x)?.ctx)
    }

    pub fn initial_state(&self, x: &[TokenId]) -> Result<DecoderState, ModelError> {
        self.encode(x).map(DecoderState)
    }

    /// Advances the decoder by one token and returns the logits of the next
    /// action together with the new state.
    pub fn step_logits(&self, state: &DecoderState, prev: TokenId) -> Result<(Vec<f64>, DecoderState), ModelError> {
        self.trunk.check_tokens(&[prev])?;
        let cache = self.trunk.step(&state.0, prev);
        let logits = self.logits(&cache.h);
        Ok((logits, DecoderState(cache.h)))
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut logits = self.out_b.data.clone();
        self.out_w.matvec_add(0..self.out_w.rows, h, &mut logits);
        logits
    }

    fn log_probs(&self, h: &[f64]) -> Vec<f64> {
        let logits = self.logits(h);
        let mut lp = vec![0.0; logits.len()];
        log_softmax(&logits, &mut lp);
        lp
    }

    /// Full next-token log-distribution at state `[x, prefix]`.
    pub fn next_token_logprobs(&self, x: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        // unroll with a dummy final target so the last state sees all of prefix
        let mut targets = prefix.to_vec();
        targets.push(self.eos);
        let (_, steps) = self.trunk.unroll(x, &targets, self.bos)?;
        Ok(self.log_probs(&steps.last().expect("non-empty").h))
    }

    /// Teacher-forced log-probabilities of each target token.
    pub fn sequence_logprob(&self, x: &[TokenId], y: &[TokenId], max_len: usize) -> Result<Vec<f64>, ModelError> {
        self.check_target(y, max_len)?;
        self.score_tokens(x, y)
    }

    /// Teacher-forced log-probabilities without the EOS/length contract.
    pub fn score_tokens(&self, x: &[TokenId], y: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let (_, steps) = self.trunk.unroll(x, y, self.bos)?;
        let out: Vec<f64> = steps.iter().zip(y).map(|(s, &a)| self.log_probs(&s.h)[a as usize]).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(out)
    }

    fn check_target(&self, y: &[TokenId], max_len: usize) -> Result<(), ModelError> {
        if y.len() > max_len {
            return Err(ModelError::TooLong { len: y.len(), max: max_len });
        }
        if y.last() != Some(&self.eos) && y.len() < max_len {
            return Err(ModelError::MissingEos);
        }
        Ok(())
    }

    /// Log-probabilities of `y` and the gradient of `Σ_t dlogp[t] · logp_t`.
    ///
    /// Unlike [`sequence_logprob`](Self::sequence_logprob) this accepts any
    /// `y`, including truncated rollouts that never emitted EOS.
    pub fn backward_logprob(&self, x: &[TokenId], y: &[TokenId], dlogp: &[f64]) -> Result<(Vec<f64>, PolicyParams), ModelError> {
        if dlogp.len() != y.len() {
            return Err(ModelError::LengthMismatch { expected: y.len(), got: dlogp.len() });
        }
        let (enc, steps) = self.trunk.unroll(x, y, self.bos)?;
        let mut grads = self.zeros_like();
        let mut logps = Vec::with_capacity(y.len());
        let mut dh_out = Vec::with_capacity(y.len());
        for ((cache, &a), &g) in steps.iter().zip(y).zip(dlogp) {
            let lp = self.log_probs(&cache.h);
            let chosen = lp[a as usize];
            if !chosen.is_finite() {
                return Err(ModelError::NonFinite);
            }
            logps.push(chosen);
            // d logp_a / d logits = onehot(a) - softmax
            let dlogits: Vec<f64> =
                lp.iter().enumerate().map(|(j, &l)| g * (if j == a as usize { 1.0 } else { 0.0 } - exp(l))).collect();
            grads.out_w.outer_add(0..self.out_w.rows, &dlogits, &cache.h);
            grads.out_b.col_add(0..self.out_b.rows, &dlogits);
            let mut dh = vec![0.0; cache.h.len()];
            self.out_w.matvec_t_add(0..self.out_w.rows, &dlogits, &mut dh);
            dh_out.push(dh);
        }
        self.trunk.backward(x, &enc, &steps, &dh_out, &mut grads.trunk);
        Ok((logps, grads))
    }

    /// Negative log-likelihood of `y` (summed over tokens) and its gradient.
    pub fn nll_grad(&self, x: &[TokenId], y: &[TokenId]) -> Result<(f64, PolicyParams), ModelError> {
        let ones = vec![-1.0; y.len()];
        let (lp, grads) = self.backward_logprob(x, y, &ones)?;
        Ok((-lp.iter().sum::<f64>(), grads))
    }
}

impl ValueParams {
    /// Copies the policy trunk and attaches a zero scalar head, so the fresh
    /// value network predicts 0 everywhere.
    pub fn from_policy(policy: &PolicyParams) -> Self {
        let d = policy.trunk.dim();
        Self { trunk: policy.trunk.clone(), head_w: Matrix::zeros(1, d), head_b: Matrix::zeros(1, 1), bos: policy.bos }
    }

    fn head(&self, h: &[f64]) -> f64 {
        dot(self.head_w.row(0), h) + self.head_b.data[0]
    }

    /// `V_φ(s_t)` for `t = 0..y.len()`.
    pub fn values(&self, x: &[TokenId], y: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let (_, steps) = self.trunk.unroll(x, y, self.bos)?;
        Ok(steps.iter().map(|s| self.head(&s.h)).collect())
    }

    /// Values along `y` and the gradient of `Σ_t dv[t] · V(s_t)`.
    pub fn backward(&self, x: &[TokenId], y: &[TokenId], dv: &[f64]) -> Result<(Vec<f64>, ValueParams), ModelError> {
        if dv.len() != y.len() {
            return Err(ModelError::LengthMismatch { expected: y.len(), got: dv.len() });
        }
        let (enc, steps) = self.trunk.unroll(x, y, self.bos)?;
        let mut grads = self.zeros_like();
        let mut values = Vec::with_capacity(y.len());
        let mut dh_out = Vec::with_capacity(y.len());
        for (cache, &g) in steps.iter().zip(dv) {
            let v = self.head(&cache.h);
            if !v.is_finite() {
                return Err(ModelError::NonFinite);
            }
            values.push(v);
            grads.head_w.outer_add(0..1, &[g], &cache.h);
            grads.head_b.data[0] += g;
            dh_out.push(self.head_w.row(0).iter().map(|w| w * g).collect());
        }
        self.trunk.backward(x, &enc, &steps, &dh_out, &mut grads.trunk);
        Ok((values, grads))
    }
}

/// Frozen copy of the policy used as the KL anchor π_0.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy(PolicyParams);

impl ReferencePolicy {
    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

pub fn snapshot(policy: &PolicyParams) -> ReferencePolicy {
    ReferencePolicy(policy.clone())
}

pub fn init_value_from_policy(policy: &PolicyParams) -> ValueParams {
    ValueParams::from_policy(policy)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index(logprobs: &[f64], rng: &mut impl RngCore) -> usize {
    let u = unit_f64(rng);
    let mut acc = 0.0;
    for (i, &lp) in logprobs.iter().enumerate() {
        acc += exp(lp);
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    logprobs.iter().rposition(|lp| lp.is_finite()).unwrap_or(logprobs.len() - 1)
}

/// Generates a rewrite until EOS or `max_len` tokens.
pub fn sample_sequence(
    policy: &PolicyParams,
    value: Option<&ValueParams>,
    x: &[TokenId],
    mode: Decode,
    max_len: usize,
) -> Result<Rollout, ModelError> {
    let mut rng = match mode {
        Decode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decode::Greedy => None,
    };
    let mut h = policy.trunk.encode(x)?.ctx;
    let mut hv = match value {
        Some(v) => Some(v.trunk.encode(x)?.ctx),
        None => None,
    };
    let mut out = Rollout { tokens: Vec::new(), logprobs: Vec::new(), values: Vec::new() };
    let mut prev = policy.bos;
    while out.tokens.len() < max_len {
        let cache = policy.trunk.step(&h, prev);
        let lp = policy.log_probs(&cache.h);
        if lp.iter().any(|v| v.is_nan()) {
            return Err(ModelError::NonFinite);
        }
        let v = match (value, hv.as_mut()) {
            (Some(vp), Some(state)) => {
                let c = vp.trunk.step(state, prev);
                let v = vp.head(&c.h);
                *state = c.h;
                v
            }
            _ => 0.0,
        };
        let a = match rng.as_mut() {
            Some(r) => sample_index(&lp, r),
            None => argmax(&lp),
        };
        out.tokens.push(a as TokenId);
        out.logprobs.push(lp[a]);
        out.values.push(v);
        h = cache.h;
        prev = a as TokenId;
        if prev == policy.eos {
            break;
        }
    }
    Ok(out)
}
