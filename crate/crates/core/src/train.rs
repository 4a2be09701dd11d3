//! Supervised warm-up on pseudo pairs and PPO fine-tuning against a reward
//! environment.

use alloc::vec::Vec;
use core::fmt;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::optim::{clip_grad_norm, Adam};
use crate::policy::{sample_sequence, snapshot, Decode, ModelError, ParamSet, PolicyParams, ValueParams};
use crate::rl::{gae, kl_per_step, normalize, ppo_losses, shape_rewards, PpoBatch, RlError, TrainConfig};
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    EmptyPairs,
    EmptyDataset,
    InvalidConfig(&'static str),
    Diverged { step: usize },
    Model(ModelError),
    Rl(RlError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyPairs => write!(f, "no training pairs"),
            TrainError::EmptyDataset => write!(f, "no training inputs"),
            TrainError::InvalidConfig(field) => write!(f, "invalid training config: {field}"),
            TrainError::Diverged { step } => write!(f, "training diverged (non-finite loss or parameters) at step {step}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Rl(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<RlError> for TrainError {
    fn from(e: RlError) -> Self {
        TrainError::Rl(e)
    }
}

/// A tokenized (question, rewrite) pair; the rewrite ends with EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPair {
    pub question: Vec<TokenId>,
    pub rewrite: Vec<TokenId>,
}

/// Mean over pairs of the summed token negative log-likelihood.
pub fn warmup_nll(policy: &PolicyParams, pairs: &[TokenPair], max_len: usize) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyPairs);
    }
    let mut total = 0.0;
    for p in pairs {
        total -= policy.sequence_logprob(&p.question, &p.rewrite, max_len)?.iter().sum::<f64>();
    }
    Ok(total / pairs.len() as f64)
}

/// [`warmup_nll`] together with its gradient.
pub fn warmup_nll_grad(policy: &PolicyParams, pairs: &[TokenPair]) -> Result<(f64, PolicyParams), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyPairs);
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut grads = policy.zeros_like();
    let mut loss = 0.0;
    for p in pairs {
        let (l, g) = policy.nll_grad(&p.question, &p.rewrite)?;
        loss += l * inv;
        grads.add_scaled(&g, inv);
    }
    Ok((loss, grads))
}

/// Full-batch Adam on the warm-up loss for `cfg.warmup_epochs` steps.
/// Returns the loss measured before each step.
pub fn train_warmup(policy: &mut PolicyParams, pairs: &[TokenPair], cfg: &TrainConfig) -> Result<Vec<f64>, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyPairs);
    }
    for p in pairs {
        if p.rewrite.len() > cfg.max_len {
            return Err(ModelError::TooLong { len: p.rewrite.len(), max: cfg.max_len }.into());
        }
        if p.rewrite.last() != Some(&policy.eos) {
            return Err(ModelError::MissingEos.into());
        }
    }
    let mut opt = Adam::new(policy, cfg.warmup_learning_rate);
    let mut curve = Vec::with_capacity(cfg.warmup_epochs);
    for step in 0..cfg.warmup_epochs {
        let (loss, mut grads) = warmup_nll_grad(policy, pairs)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        curve.push(loss);
        clip_grad_norm::<_, PolicyParams>(&mut grads, None, cfg.max_grad_norm);
        opt.step(policy, &grads);
        if !policy.is_finite() {
            return Err(TrainError::Diverged { step });
        }
    }
    Ok(curve)
}

/// Outcome of one environment call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvReward {
    pub r_lm: f64,
    pub em: f64,
    pub f1: f64,
}

/// Per-iteration training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_em: f64,
    pub mean_f1: f64,
    /// Mean over episodes of the summed per-step KL estimate.
    pub mean_kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub episodes: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct PpoOutcome {
    pub value: ValueParams,
    pub log: Vec<IterationLog>,
}

struct Experience {
    input: usize,
    tokens: Vec<TokenId>,
    old_logp: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

/// PPO fine-tuning of `policy` against `env`.
///
/// `env(i, rewrite)` scores the rewrite (EOS stripped) generated for
/// `inputs[i]`. Errors from `env` skip that episode for the iteration.
/// The KL anchor π_0 is a snapshot of `policy` on entry and the value
/// network is initialized from it. `observe` sees every iteration's log and
/// the parameters after its updates.
pub fn train_ppo<E, F, O>(
    policy: &mut PolicyParams,
    inputs: &[Vec<TokenId>],
    mut env: F,
    cfg: &TrainConfig,
    mut observe: O,
) -> Result<PpoOutcome, TrainError>
where
    F: FnMut(usize, &[TokenId]) -> Result<EnvReward, E>,
    O: FnMut(&IterationLog, &PolicyParams, &ValueParams),
{
    cfg.validate().map_err(TrainError::InvalidConfig)?;
    if inputs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let reference = snapshot(policy);
    let mut value = ValueParams::from_policy(policy);
    let mut policy_opt = Adam::new(policy, cfg.learning_rate);
    let mut value_opt = Adam::new(&value, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let mut batch: Vec<Experience> = Vec::with_capacity(cfg.rollout_batch);
        let (mut sum_r, mut sum_em, mut sum_f1, mut sum_kl) = (0.0, 0.0, 0.0, 0.0);
        let mut skipped = 0;
        for _ in 0..cfg.rollout_batch {
            let input = (rng.next_u64() % inputs.len() as u64) as usize;
            let seed = rng.next_u64();
            let x = &inputs[input];
            let rollout = sample_sequence(policy, Some(&value), x, Decode::Sample { seed }, cfg.max_len)?;
            let rewrite = match rollout.tokens.split_last() {
                Some((&last, head)) if last == policy.eos => head,
                _ => &rollout.tokens[..],
            };
            let reward = match env(input, rewrite) {
                Ok(r) => r,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let ref_logp = reference.params().score_tokens(x, &rollout.tokens)?;
            let kl = kl_per_step(&rollout.logprobs, &ref_logp)?;
            let rewards = shape_rewards(reward.r_lm, &kl, cfg.kl_beta);
            let mut values = rollout.values.clone();
            values.push(0.0);
            let (advantages, returns) = gae(&rewards, &values, cfg.gamma, cfg.gae_lambda)?;
            sum_r += reward.r_lm;
            sum_em += reward.em;
            sum_f1 += reward.f1;
            sum_kl += kl.iter().sum::<f64>();
            batch.push(Experience { input, tokens: rollout.tokens, old_logp: rollout.logprobs, advantages, returns });
        }

        if cfg.normalize_advantages {
            let mut flat: Vec<f64> = batch.iter().flat_map(|e| e.advantages.iter().copied()).collect();
            normalize(&mut flat);
            let mut it = flat.into_iter();
            for e in batch.iter_mut() {
                e.advantages.iter_mut().for_each(|a| *a = it.next().expect("same length"));
            }
        }

        let (mut p_loss, mut v_loss, mut clip_frac, mut updates) = (0.0, 0.0, 0.0, 0usize);
        let mut order: Vec<usize> = (0..batch.len()).collect();
        for _ in 0..cfg.ppo_epochs {
            shuffle(&mut order, &mut rng);
            for mb in order.chunks(cfg.minibatch_size) {
                let stats = ppo_update(policy, &mut value, &batch, mb, inputs, cfg, &mut policy_opt, &mut value_opt)?;
                if !(policy.is_finite() && value.is_finite()) {
                    return Err(TrainError::Diverged { step: iter });
                }
                p_loss += stats.0;
                v_loss += stats.1;
                clip_frac += stats.2;
                updates += 1;
            }
        }

        let n = batch.len().max(1) as f64;
        let u = updates.max(1) as f64;
        let entry = IterationLog {
            iter,
            mean_reward: sum_r / n,
            mean_em: sum_em / n,
            mean_f1: sum_f1 / n,
            mean_kl: sum_kl / n,
            policy_loss: p_loss / u,
            value_loss: v_loss / u,
            clip_fraction: clip_frac / u,
            episodes: batch.len(),
            skipped,
        };
        observe(&entry, policy, &value);
        log.push(entry);
    }
    Ok(PpoOutcome { value, log })
}

/// Mean environment reward of `episodes` sampled rewrites, cycling through
/// `inputs` in order. Episodes whose env call fails are left out.
pub fn mean_sampled_reward<E, F>(
    policy: &PolicyParams,
    inputs: &[Vec<TokenId>],
    mut env: F,
    episodes: usize,
    max_len: usize,
    seed: u64,
) -> Result<f64, TrainError>
where
    F: FnMut(usize, &[TokenId]) -> Result<EnvReward, E>,
{
    if inputs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut n) = (0.0, 0usize);
    for k in 0..episodes {
        let input = k % inputs.len();
        let rollout = sample_sequence(policy, None, &inputs[input], Decode::Sample { seed: rng.next_u64() }, max_len)?;
        let rewrite = match rollout.tokens.split_last() {
            Some((&last, head)) if last == policy.eos => head,
            _ => &rollout.tokens[..],
        };
        if let Ok(r) = env(input, rewrite) {
            total += r.r_lm;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

#[allow(clippy::too_many_arguments)]
fn ppo_update(
    policy: &mut PolicyParams,
    value: &mut ValueParams,
    batch: &[Experience],
    minibatch: &[usize],
    inputs: &[Vec<TokenId>],
    cfg: &TrainConfig,
    policy_opt: &mut Adam,
    value_opt: &mut Adam,
) -> Result<(f64, f64, f64), TrainError> {
    let mut advantages = Vec::new();
    let mut returns = Vec::new();
    let mut old_logp = Vec::new();
    let mut new_logp = Vec::new();
    let mut values = Vec::new();
    for &i in minibatch {
        let e = &batch[i];
        let x = &inputs[e.input];
        advantages.extend_from_slice(&e.advantages);
        returns.extend_from_slice(&e.returns);
        old_logp.extend_from_slice(&e.old_logp);
        new_logp.extend(policy.score_tokens(x, &e.tokens)?);
        values.extend(value.values(x, &e.tokens)?);
    }
    let losses = ppo_losses(
        &PpoBatch { advantages: &advantages, returns: &returns, old_logp: &old_logp, new_logp: &new_logp, values: &values },
        cfg.clip_eps,
        cfg.value_coef,
    )?;

    let mut p_grads = policy.zeros_like();
    let mut v_grads = value.zeros_like();
    let mut offset = 0;
    for &i in minibatch {
        let e = &batch[i];
        let x = &inputs[e.input];
        let t = e.tokens.len();
        let (_, g) = policy.backward_logprob(x, &e.tokens, &losses.d_logp[offset..offset + t])?;
        p_grads.add_scaled(&g, 1.0);
        let (_, g) = value.backward(x, &e.tokens, &losses.d_value[offset..offset + t])?;
        v_grads.add_scaled(&g, 1.0);
        offset += t;
    }
    clip_grad_norm(&mut p_grads, Some(&mut v_grads), cfg.max_grad_norm);
    policy_opt.step(policy, &p_grads);
    value_opt.step(value, &v_grads);
    Ok((losses.policy, losses.value, losses.clip_fraction))
}

fn shuffle(xs: &mut [usize], rng: &mut impl RngCore) {
    for i in (1..xs.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        xs.swap(i, j);
    }
}
