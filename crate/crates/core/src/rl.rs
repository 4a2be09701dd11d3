//! Reward composition, KL shaping, generalized advantage estimation and the
//! clipped PPO surrogate with its value loss.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math::{exp, sqrt};
use crate::metrics::{ScoreTriple, TaskKind};

#[derive(Debug, Clone, PartialEq)]
pub enum RlError {
    MissingHit,
    LengthMismatch { expected: usize, got: usize },
    NonFiniteRatio { step: usize },
    Empty,
}

impl fmt::Display for RlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RlError::MissingHit => write!(f, "open-QA reward needs the retrieval hit indicator"),
            RlError::LengthMismatch { expected, got } => write!(f, "length mismatch: expected {expected}, got {got}"),
            RlError::NonFiniteRatio { step } => write!(f, "probability ratio at step {step} is not finite"),
            RlError::Empty => write!(f, "empty batch"),
        }
    }
}

impl core::error::Error for RlError {}

/// Every scalar hyperparameter of warm-up and PPO training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
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
    pub seed: u64,
    pub normalize_advantages: bool,
    pub max_len: usize,
    pub hidden_dim: usize,
    pub warmup_epochs: usize,
    pub warmup_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            gamma: 1.0,
            gae_lambda: 0.95,
            kl_beta: 0.02,
            value_coef: 0.5,
            f1_coef: 1.0,
            hit_coef: 0.2,
            ppo_epochs: 4,
            minibatch_size: 8,
            rollout_batch: 16,
            learning_rate: 3e-3,
            max_grad_norm: 1.0,
            iterations: 200,
            seed: 0,
            normalize_advantages: true,
            max_len: 32,
            hidden_dim: 32,
            warmup_epochs: 300,
            warmup_learning_rate: 1e-2,
        }
    }
}

impl TrainConfig {
    /// Range checks on every field; returns the offending field name.
    pub fn validate(&self) -> Result<(), &'static str> {
        let finite = [
            self.clip_eps,
            self.gamma,
            self.gae_lambda,
            self.kl_beta,
            self.value_coef,
            self.f1_coef,
            self.hit_coef,
            self.learning_rate,
            self.max_grad_norm,
            self.warmup_learning_rate,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err("all coefficients must be finite");
        }
        if self.clip_eps <= 0.0 {
            return Err("clip_eps");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err("gamma");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err("gae_lambda");
        }
        if self.kl_beta < 0.0 {
            return Err("kl_beta");
        }
        if self.value_coef < 0.0 || self.f1_coef < 0.0 || self.hit_coef < 0.0 {
            return Err("value_coef/f1_coef/hit_coef");
        }
        if self.learning_rate < 0.0 || self.warmup_learning_rate < 0.0 {
            return Err("learning_rate");
        }
        if self.max_grad_norm <= 0.0 {
            return Err("max_grad_norm");
        }
        if self.minibatch_size == 0 || self.rollout_batch == 0 {
            return Err("minibatch_size/rollout_batch");
        }
        if self.max_len == 0 || self.hidden_dim == 0 {
            return Err("max_len/hidden_dim");
        }
        Ok(())
    }
}

/// Task reward: `EM + λ_f·F1 + λ_h·h` for open QA, `EM + λ_f·F1` for
/// multi-choice.
pub fn task_reward(scores: &ScoreTriple, kind: TaskKind, cfg: &TrainConfig) -> Result<f64, RlError> {
    let base = scores.em + cfg.f1_coef * scores.f1;
    match kind {
        TaskKind::OpenQa => {
            let hit = scores.hit.ok_or(RlError::MissingHit)?;
            Ok(base + cfg.hit_coef * hit)
        }
        TaskKind::MultiChoice => Ok(base),
    }
}

/// Sampled-action KL estimate per step: `log π_θ(a_t|s_t) − log π_0(a_t|s_t)`.
pub fn kl_per_step(logp: &[f64], ref_logp: &[f64]) -> Result<Vec<f64>, RlError> {
    if logp.len() != ref_logp.len() {
        return Err(RlError::LengthMismatch { expected: logp.len(), got: ref_logp.len() });
    }
    Ok(logp.iter().zip(ref_logp).map(|(a, b)| a - b).collect())
}

/// Per-step rewards `−β·kl_t`, with the task reward added at the final step.
pub fn shape_rewards(r_lm: f64, kl: &[f64], beta: f64) -> Vec<f64> {
    let mut out: Vec<f64> = kl.iter().map(|k| -beta * k).collect();
    if let Some(last) = out.last_mut() {
        *last += r_lm;
    }
    out
}

/// Advantages and value targets for one episode.
///
/// `values` holds `V(s_0)..V(s_T)`; the terminal entry is 0 for a finished
/// episode. Returns `(Â_t, R_t = Â_t + V(s_t))`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>), RlError> {
    let t_len = rewards.len();
    if values.len() != t_len + 1 {
        return Err(RlError::LengthMismatch { expected: t_len + 1, got: values.len() });
    }
    let mut adv = vec![0.0; t_len];
    let mut running = 0.0;
    for t in (0..t_len).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Rescales to zero mean and unit variance; a constant batch becomes zeros.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = sqrt(var) + 1e-8;
    xs.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

/// Flattened per-step quantities of a PPO minibatch.
#[derive(Debug, Clone, Copy)]
pub struct PpoBatch<'a> {
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
    pub old_logp: &'a [f64],
    pub new_logp: &'a [f64],
    pub values: &'a [f64],
}

/// Loss values plus their derivatives with respect to the per-step new
/// log-probabilities and value predictions (of the total loss).
#[derive(Debug, Clone, PartialEq)]
pub struct PpoLosses {
    pub policy: f64,
    pub value: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub d_logp: Vec<f64>,
    pub d_value: Vec<f64>,
}

pub fn clip(r: f64, eps: f64) -> f64 {
    r.clamp(1.0 - eps, 1.0 + eps)
}

/// Surrogate term `min(r·A, clip(r)·A)` and whether the clipped branch is
/// the strict minimum (where the gradient vanishes).
pub fn clipped_objective(ratio: f64, adv: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = clip(ratio, eps) * adv;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

/// `L_θ = −mean(min(r·A, clip(r,1−ε,1+ε)·A))`, `L_φ = mean((V − R)²)`,
/// `total = L_θ + λ_v·L_φ`; means run over every step in the batch.
pub fn ppo_losses(batch: &PpoBatch<'_>, clip_eps: f64, value_coef: f64) -> Result<PpoLosses, RlError> {
    let n = batch.advantages.len();
    if n == 0 {
        return Err(RlError::Empty);
    }
    for len in [batch.returns.len(), batch.old_logp.len(), batch.new_logp.len(), batch.values.len()] {
        if len != n {
            return Err(RlError::LengthMismatch { expected: n, got: len });
        }
    }
    let inv = 1.0 / n as f64;
    let mut obj_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut clipped_steps = 0usize;
    let mut d_logp = vec![0.0; n];
    let mut d_value = vec![0.0; n];
    for t in 0..n {
        let ratio = exp(batch.new_logp[t] - batch.old_logp[t]);
        if !ratio.is_finite() {
            return Err(RlError::NonFiniteRatio { step: t });
        }
        let adv = batch.advantages[t];
        let (obj, clipped) = clipped_objective(ratio, adv, clip_eps);
        obj_sum += obj;
        if clipped {
            clipped_steps += 1;
        } else {
            // d(r·A)/d logp = r·A
            d_logp[t] = -ratio * adv * inv;
        }
        let err = batch.values[t] - batch.returns[t];
        sq_sum += err * err;
        d_value[t] = value_coef * 2.0 * err * inv;
    }
    let policy = -obj_sum / n as f64;
    let value = sq_sum / n as f64;
    Ok(PpoLosses {
        policy,
        value,
        total: policy + value_coef * value,
        clip_fraction: clipped_steps as f64 * inv,
        d_logp,
        d_value,
    })
}
