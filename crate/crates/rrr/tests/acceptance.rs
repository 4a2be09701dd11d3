//! Acceptance suite. Prints one PASS/FAIL line per criterion with its
//! runtime and budget; exits non-zero if any criterion fails. Numeric
//! arguments restrict the run to those criteria.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestRng, TestRunner};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rrr::checkpoint::Checkpoint;
use rrr::config::{Config, RetrievalKind};
use rrr::data::{load_dataset, load_pseudo_data, PseudoPair};
use rrr::mock::{MockFixture, MockPage, MockServices, DEFAULT_BASE};
use rrr::pipeline::{collect_pseudo_data, make_env, run_dataset, tokenize_pairs, PipelineMode, RunSettings};
use rrr::retrieval::{PageFetcher, RetrievalMode, Retriever};
use rrr_core::bm25::Bm25Params;
use rrr_core::metrics::{self, TaskKind};
use rrr_core::policy::{sample_sequence, ModelShape, ParamSet};
use rrr_core::prompt::{build_reader_prompt, build_rewriter_prompt, parse_answer, parse_queries, Demonstrations};
use rrr_core::rl::{clip, clipped_objective, gae, ppo_losses, task_reward, PpoBatch};
use rrr_core::train::{mean_sampled_reward, train_ppo, train_warmup, warmup_nll, warmup_nll_grad, TokenPair};
use rrr_core::{Decode, PolicyParams, ScoreTriple, TrainConfig, ValueParams, Vocab};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion { id: 1, name: "metrics oracle", budget: Duration::from_secs(1), run: metrics_oracle },
        Criterion { id: 2, name: "GAE correctness", budget: Duration::from_secs(5), run: gae_correctness },
        Criterion { id: 3, name: "gradient fidelity", budget: Duration::from_secs(30), run: gradient_fidelity },
        Criterion { id: 4, name: "PPO algebra", budget: Duration::from_secs(1), run: ppo_algebra },
        Criterion { id: 5, name: "reward composition", budget: Duration::from_secs(1), run: reward_composition },
        Criterion { id: 6, name: "pseudo-data filter", budget: Duration::from_secs(1), run: pseudo_data_filter },
        Criterion { id: 7, name: "warm-up memorization", budget: Duration::from_secs(60), run: warmup_memorization },
        Criterion { id: 8, name: "end-to-end RL improvement", budget: Duration::from_secs(600), run: rl_improvement },
        Criterion { id: 9, name: "retrieval ablation structure", budget: Duration::from_secs(30), run: retrieval_ablation },
        Criterion { id: 10, name: "prompt pinning", budget: Duration::from_secs(5), run: prompt_pinning },
        Criterion { id: 11, name: "determinism", budget: Duration::from_secs(30), run: determinism },
    ];
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over time budget")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} criterion {:>2}: {} ({:.3} s, budget {} s) {}",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

// ---------------------------------------------------------------- 1

const PUNCT: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

fn oracle_normalize(s: &str) -> String {
    let kept: String = s.to_lowercase().chars().filter(|c| !PUNCT.contains(*c)).collect();
    kept.split_whitespace().filter(|w| !matches!(*w, "a" | "an" | "the")).collect::<Vec<_>>().join(" ")
}

fn oracle_letters(s: &str) -> Vec<String> {
    let mut set = [false; 26];
    for piece in s.split(|c: char| c == ',' || c.is_whitespace()) {
        let t: Vec<char> = piece.trim_matches(|c: char| PUNCT.contains(c)).chars().collect();
        if t.len() == 1 && t[0].is_ascii_alphabetic() {
            set[(t[0].to_ascii_uppercase() as u8 - b'A') as usize] = true;
        }
    }
    (0..26).filter(|&i| set[i]).map(|i| ((b'A' + i as u8) as char).to_string()).collect()
}

fn oracle_tokens(s: &str, kind: TaskKind) -> Vec<String> {
    match kind {
        TaskKind::OpenQa => oracle_normalize(s).split_whitespace().map(String::from).collect(),
        TaskKind::MultiChoice => oracle_letters(s),
    }
}

/// Brute-force multiset overlap: each gold token can be claimed once.
fn oracle_f1(pred: &[String], gold: &[String]) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut used = vec![false; gold.len()];
    let mut overlap = 0;
    for p in pred {
        if let Some(j) = (0..gold.len()).find(|&j| !used[j] && gold[j] == *p) {
            used[j] = true;
            overlap += 1;
        }
    }
    2.0 * overlap as f64 / (pred.len() + gold.len()) as f64
}

fn oracle_em(pred: &str, golds: &[&str], kind: TaskKind) -> f64 {
    let same = golds.iter().any(|g| match kind {
        TaskKind::OpenQa => oracle_normalize(pred) == oracle_normalize(g),
        TaskKind::MultiChoice => oracle_letters(pred) == oracle_letters(g),
    });
    if same {
        1.0
    } else {
        0.0
    }
}

fn oracle_max_f1(pred: &str, golds: &[&str], kind: TaskKind) -> f64 {
    let p = oracle_tokens(pred, kind);
    golds.iter().map(|g| oracle_f1(&p, &oracle_tokens(g, kind))).fold(0.0, f64::max)
}

type MetricCase = (&'static str, &'static [&'static str], TaskKind, Option<(f64, f64)>);

fn metric_cases() -> Vec<MetricCase> {
    use TaskKind::{MultiChoice as M, OpenQa as O};
    const TWO_THIRDS: f64 = 2.0 / 3.0;
    vec![
        ("Paris", &["Paris"], O, Some((1.0, 1.0))),
        ("paris", &["Paris"], O, None),
        ("The Eiffel Tower", &["Eiffel Tower"], O, Some((1.0, 1.0))),
        ("an apple", &["Apple"], O, None),
        ("A cat sat on the mat", &["cat sat on mat"], O, None),
        ("the the the", &[""], O, Some((1.0, 1.0))),
        ("", &["Paris"], O, Some((0.0, 0.0))),
        ("Paris", &[""], O, None),
        ("U.S.A.", &["USA"], O, None),
        ("Mary Shelley!", &["mary shelley"], O, None),
        ("Shelley, Mary", &["Mary Shelley"], O, Some((0.0, 1.0))),
        ("new york new york", &["new york"], O, Some((0.0, TWO_THIRDS))),
        ("new york", &["new york new york"], O, None),
        ("york york york", &["new york york"], O, Some((0.0, TWO_THIRDS))),
        ("Barack Obama", &["Obama", "Barack Hussein Obama"], O, None),
        ("Hussein", &["Obama", "Barack Hussein Obama"], O, Some((0.0, 0.5))),
        ("1989", &["1989", "November 1989"], O, None),
        ("9 November 1989", &["1989", "November 9, 1989"], O, None),
        ("  lots   of   space ", &["lots of space"], O, None),
        ("theatre", &["the atre"], O, Some((0.0, 0.0))),
        ("anthem", &["an them"], O, None),
        ("Rock 'n' Roll", &["rock n roll"], O, None),
        ("e-mail", &["email"], O, None),
        ("AT&T", &["at t"], O, None),
        ("Dr. Who?", &["dr who"], O, None),
        ("a", &["the"], O, Some((1.0, 1.0))),
        ("Jupiter", &["Saturn", "Mars"], O, None),
        ("red green blue", &["blue green red"], O, None),
        ("red red green", &["red green green"], O, None),
        ("Zürich", &["zürich"], O, None),
        ("Café au lait", &["cafe au lait"], O, None),
        ("the Beatles (band)", &["Beatles band"], O, None),
        ("$100", &["100"], O, None),
        ("3.14", &["314"], O, None),
        ("Answer: Paris", &["Paris"], O, Some((0.0, TWO_THIRDS))),
        ("cat sat down", &["cat sat"], O, Some((0.0, 0.8))),
        ("A", &["A"], M, None),
        ("a", &["A"], M, None),
        ("B", &["A"], M, Some((0.0, 0.0))),
        ("A, C", &["C,A"], M, Some((1.0, 1.0))),
        ("A C", &["A,C"], M, None),
        ("A", &["A,C"], M, Some((0.0, TWO_THIRDS))),
        ("A,B,C", &["A,C"], M, Some((0.0, 0.8))),
        ("D", &["A", "D"], M, None),
        ("", &["B"], M, None),
        ("B.", &["B"], M, None),
        ("(C)", &["C"], M, None),
        ("A, A, B", &["A,B"], M, None),
        ("AB", &["A,B"], M, Some((0.0, 0.0))),
        ("b, d", &["D, B"], M, Some((1.0, 1.0))),
    ]
}

fn metrics_oracle() -> Outcome {
    let cases = metric_cases();
    ensure(cases.len() == 50, || format!("fixture has {} cases", cases.len()))?;
    for (i, (pred, golds, kind, hand)) in cases.iter().enumerate() {
        let (kind, golds) = (*kind, *golds);
        if kind == TaskKind::OpenQa {
            for s in std::iter::once(pred).chain(golds) {
                let (got, want) = (metrics::normalize_answer(s), oracle_normalize(s));
                ensure(got == want, || format!("case {i}: normalize({s:?}) = {got:?}, oracle {want:?}"))?;
            }
        }
        let em = metrics::exact_match(pred, golds, kind);
        let f1 = metrics::f1_score(pred, golds, kind);
        let (oem, of1) = (oracle_em(pred, golds, kind), oracle_max_f1(pred, golds, kind));
        ensure(em == oem && f1 == of1, || format!("case {i} {pred:?}: got ({em}, {f1}), oracle ({oem}, {of1})"))?;
        if let Some((hem, hf1)) = hand {
            ensure(oem == *hem && (of1 - hf1).abs() < 1e-15, || format!("case {i}: oracle disagrees with hand value"))?;
        }
    }
    Ok(format!("{} cases", cases.len()))
}

// ---------------------------------------------------------------- 2

fn gae_oracle(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let t_len = rewards.len();
    let delta: Vec<f64> = (0..t_len).map(|t| rewards[t] + gamma * values[t + 1] - values[t]).collect();
    (0..t_len).map(|t| (t..t_len).map(|k| (gamma * lambda).powi((k - t) as i32) * delta[k]).sum()).collect()
}

fn gae_correctness() -> Outcome {
    let (adv, ret) = gae(&[0.0, 1.0], &[0.5, 0.2, 0.0], 1.0, 0.9).map_err(err)?;
    ensure((adv[0] - 0.42).abs() < 1e-10 && (adv[1] - 0.8).abs() < 1e-10, || format!("hand example advantages {adv:?}"))?;
    ensure((ret[0] - 0.92).abs() < 1e-10 && (ret[1] - 1.0).abs() < 1e-10, || format!("hand example returns {ret:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let t_len = 1 + below(&mut rng, 8);
        let rewards: Vec<f64> = (0..t_len).map(|_| 4.0 * unit(&mut rng) - 2.0).collect();
        let mut values: Vec<f64> = (0..=t_len).map(|_| 4.0 * unit(&mut rng) - 2.0).collect();
        if case % 2 == 0 {
            values[t_len] = 0.0;
        }
        let gamma = if case % 5 == 0 { 1.0 } else { 0.5 + 0.5 * unit(&mut rng) };
        let lambda = match case % 11 {
            0 => 0.0,
            1 => 1.0,
            _ => unit(&mut rng),
        };
        let (adv, ret) = gae(&rewards, &values, gamma, lambda).map_err(err)?;
        let want = gae_oracle(&rewards, &values, gamma, lambda);
        for t in 0..t_len {
            let e = (adv[t] - want[t]).abs().max((ret[t] - (want[t] + values[t])).abs());
            worst = worst.max(e);
            ensure(e <= 1e-10, || format!("case {case} step {t}: gae {} vs oracle {}", adv[t], want[t]))?;
        }
    }
    Ok(format!("1000 tuples, max abs error {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

fn fd_worst<P: ParamSet>(params: &P, grads: &P, loss: impl Fn(&P) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (b, (_, g)) in grads.blocks().iter().enumerate() {
        for i in 0..g.data.len() {
            let mut plus = params.clone();
            plus.blocks_mut()[b].1.data[i] += FD_STEP;
            let mut minus = params.clone();
            minus.blocks_mut()[b].1.data[i] -= FD_STEP;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data[i], fd));
        }
    }
    worst
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize, eos_last: bool) -> Vec<u32> {
    let mut v: Vec<u32> = (0..len).map(|_| 2 + below(rng, vocab - 2) as u32).collect();
    if eos_last {
        *v.last_mut().expect("len >= 1") = 1;
    }
    v
}

fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let vocab = 4 + below(&mut rng, 9);
        let dim = 2 + below(&mut rng, 7);
        let policy = PolicyParams::new(ModelShape { vocab_size: vocab, dim, bos: 0, eos: 1 }, 100 + case);

        let pairs: Vec<TokenPair> = (0..2)
            .map(|_| {
                let (ql, tl) = (1 + below(&mut rng, 5), 1 + below(&mut rng, 5));
                TokenPair { question: random_tokens(&mut rng, vocab, ql, false), rewrite: random_tokens(&mut rng, vocab, tl, true) }
            })
            .collect();
        let (_, g) = warmup_nll_grad(&policy, &pairs).map_err(err)?;
        let e_nll = fd_worst(&policy, &g, |q| warmup_nll_grad(q, &pairs).expect("valid pairs").0);

        let mut value = ValueParams::from_policy(&policy);
        for w in value.head_w.data.iter_mut().chain(value.head_b.data.iter_mut()) {
            *w = unit(&mut rng) - 0.5;
        }
        let (xl, yl) = (1 + below(&mut rng, 5), 1 + below(&mut rng, 5));
        let x = random_tokens(&mut rng, vocab, xl, false);
        let y = random_tokens(&mut rng, vocab, yl, true);
        let logp = policy.score_tokens(&x, &y).map_err(err)?;
        let eps = 0.2;
        // ratios kept away from the clip boundaries, where the loss has a kink
        let old: Vec<f64> = logp
            .iter()
            .map(|l| loop {
                let shift = 1.2 * unit(&mut rng) - 0.6;
                let r = (-shift).exp();
                if (r - (1.0 - eps)).abs() > 1e-3 && (r - (1.0 + eps)).abs() > 1e-3 {
                    break l + shift;
                }
            })
            .collect();
        let adv: Vec<f64> = y.iter().map(|_| 2.0 * unit(&mut rng) - 1.0).collect();
        let ret: Vec<f64> = y.iter().map(|_| 2.0 * unit(&mut rng) - 1.0).collect();
        let total = |p: &PolicyParams, v: &ValueParams| {
            let nl = p.score_tokens(&x, &y).expect("valid tokens");
            let vals = v.values(&x, &y).expect("valid tokens");
            ppo_losses(&PpoBatch { advantages: &adv, returns: &ret, old_logp: &old, new_logp: &nl, values: &vals }, eps, 0.5)
                .expect("finite batch")
        };
        let l = total(&policy, &value);
        let (_, gp) = policy.backward_logprob(&x, &y, &l.d_logp).map_err(err)?;
        let (_, gv) = value.backward(&x, &y, &l.d_value).map_err(err)?;
        let e_pol = fd_worst(&policy, &gp, |p| total(p, &value).total);
        let e_val = fd_worst(&value, &gv, |v| total(&policy, v).total);

        let e = e_nll.max(e_pol).max(e_val);
        worst = worst.max(e);
        ensure(e < 1e-4, || format!("config {case} (V={vocab}, d={dim}): nll {e_nll:.2e}, policy {e_pol:.2e}, value {e_val:.2e}"))?;
    }
    Ok(format!("20 configs, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 4

fn ppo_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..200 {
        let n = 1 + below(&mut rng, 16);
        let adv: Vec<f64> = (0..n).map(|_| (below(&mut rng, 65) as f64 - 32.0) / 8.0).collect();
        let logp: Vec<f64> = (0..n).map(|_| -3.0 * unit(&mut rng)).collect();
        let zeros = vec![0.0; n];
        let l = ppo_losses(&PpoBatch { advantages: &adv, returns: &zeros, old_logp: &logp, new_logp: &logp, values: &zeros }, 0.2, 0.5)
            .map_err(err)?;
        let want = -adv.iter().sum::<f64>() / n as f64;
        ensure(l.policy == want, || format!("case {case}: policy loss {} != -mean(A) {want}", l.policy))?;
    }
    let l = ppo_losses(&PpoBatch { advantages: &[2.0], returns: &[0.0], old_logp: &[-0.7], new_logp: &[-0.7], values: &[0.0] }, 0.2, 0.5)
        .map_err(err)?;
    ensure(l.policy == -2.0, || format!("theta = theta', A=[2]: {}", l.policy))?;

    let single = |r: f64, a: f64, eps: f64| {
        ppo_losses(&PpoBatch { advantages: &[a], returns: &[0.0], old_logp: &[0.0], new_logp: &[r.ln()], values: &[0.0] }, eps, 0.5)
            .map(|l| l.policy)
    };
    let c1 = single(1.5, 1.0, 0.2).map_err(err)?;
    let c2 = single(0.5, -1.0, 0.2).map_err(err)?;
    ensure((c1 + 1.2).abs() < 1e-12, || format!("r=1.5, A=1: {c1}"))?;
    ensure((c2 - 0.8).abs() < 1e-12, || format!("r=0.5, A=-1: {c2}"))?;

    let mut grid = 0;
    for eps in [0.1, 0.2, 0.3] {
        for k in 0..=40 {
            let r = 0.25 + k as f64 * 0.0375;
            for a in [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0] {
                grid += 1;
                let outside = r < 1.0 - eps || r > 1.0 + eps;
                ensure((clip(r, eps) != r) == outside, || format!("clip({r}, {eps}) activation"))?;
                let (obj, clipped_branch) = clipped_objective(r, a, eps);
                let want = (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a);
                ensure(obj == want, || format!("objective at r={r}, A={a}, eps={eps}: {obj} vs {want}"))?;
                // the clipped branch can only be chosen outside the interval
                ensure(!clipped_branch || outside, || format!("clipped inside the interval at r={r}, eps={eps}"))?;
                if !outside {
                    ensure(obj == r * a, || format!("inside interval r={r}: {obj} vs {}", r * a))?;
                }
            }
        }
    }
    Ok(format!("200 ratio-one batches, 3 hand cases, {grid} grid points"))
}

// ---------------------------------------------------------------- 5

fn reward_composition() -> Outcome {
    let mut checked = 0;
    for (lf, lh) in [(1.0, 0.25), (0.5, 0.5), (2.0, 0.125)] {
        let cfg = TrainConfig { f1_coef: lf, hit_coef: lh, ..TrainConfig::default() };
        for em in [0.0, 1.0] {
            for f1 in [0.0, 0.5, 1.0] {
                for h in [-1.0, 1.0] {
                    let s = ScoreTriple { em, f1, hit: Some(h) };
                    let open = task_reward(&s, TaskKind::OpenQa, &cfg).map_err(err)?;
                    ensure(open == em + lf * f1 + lh * h, || format!("open QA ({em},{f1},{h}) at ({lf},{lh}): {open}"))?;
                    let mc = task_reward(&s, TaskKind::MultiChoice, &cfg).map_err(err)?;
                    ensure(mc == em + lf * f1, || format!("multi-choice ({em},{f1},{h}) at ({lf},{lh}): {mc}"))?;
                    let mc_none = task_reward(&ScoreTriple { hit: None, ..s }, TaskKind::MultiChoice, &cfg).map_err(err)?;
                    ensure(mc_none == mc, || "multi-choice reward depends on hit".into())?;
                    checked += 3;
                }
            }
        }
        ensure(task_reward(&ScoreTriple { em: 1.0, f1: 1.0, hit: None }, TaskKind::OpenQa, &cfg).is_err(), || {
            "open QA without hit was accepted".into()
        })?;
    }
    let d = TrainConfig::default();
    let top = task_reward(&ScoreTriple { em: 1.0, f1: 1.0, hit: Some(1.0) }, TaskKind::OpenQa, &d).map_err(err)?;
    let bottom = task_reward(&ScoreTriple { em: 0.0, f1: 0.0, hit: Some(-1.0) }, TaskKind::OpenQa, &d).map_err(err)?;
    ensure((top - 2.2).abs() < 1e-12 && (bottom + 0.2).abs() < 1e-12, || format!("default coefficients: {top}, {bottom}"))?;
    Ok(format!("{checked} grid evaluations"))
}

// ---------------------------------------------------------------- 6

fn mock_settings(cfg: &Config, retrieval: &str) -> RunSettings {
    RunSettings {
        dataset_id: "mock".into(),
        retrieval: retrieval.into(),
        config_hash: cfg.hash(&[]),
        parallelism: cfg.parallelism,
        max_failure_fraction: cfg.max_failure_fraction,
    }
}

fn pseudo_data_filter() -> Outcome {
    let dir = fixtures().join("mock");
    let cfg = Config::load(&dir.join("config.toml")).map_err(err)?;
    let samples = load_dataset(&dir.join("dataset.jsonl"), TaskKind::OpenQa).map_err(err)?;
    ensure(samples.len() == 4, || format!("fixture has {} samples", samples.len()))?;
    let comps = cfg.components(RetrievalKind::Bm25, None).map_err(err)?;
    let (pairs, report) = collect_pseudo_data(&samples, &comps, &mock_settings(&cfg, "bm25")).map_err(err)?;
    let ids: Vec<&str> = pairs.iter().map(|p| p.sample_id.as_str()).collect();
    // q1 and q3 are the items whose scripted rewrites reach a gold-bearing page
    ensure(ids == ["q1", "q3"], || format!("pseudo pairs for {ids:?}"))?;
    for (s, r) in samples.iter().zip(&report.records) {
        let kept = ids.contains(&s.id.as_str());
        ensure(kept == (r.em == 1.0 && !r.rewrites.is_empty()), || format!("{} kept={kept} but em={}", s.id, r.em))?;
    }
    let q3 = &pairs[1];
    ensure(q3.rewrite == "Berlin Wall fall date; Cold War Germany", || format!("q3 rewrite {:?}", q3.rewrite))?;
    ensure(q3.original_question == samples[2].question, || "q3 question text".into())?;
    Ok("pairs for exactly {q1, q3}".into())
}

// ---------------------------------------------------------------- 7

fn warmup_memorization() -> Outcome {
    let pairs = load_pseudo_data(&fixtures().join("warmup/toy_pairs.jsonl")).map_err(err)?;
    ensure(pairs.len() == 20, || format!("{} toy pairs", pairs.len()))?;
    let vocab = Vocab::build(pairs.iter().flat_map(|p| [p.original_question.as_str(), p.rewrite.as_str()]));
    let tc = TrainConfig::default();
    let tokens = tokenize_pairs(&pairs, &vocab, tc.max_len);
    ensure(tokens.len() == 20, || "pairs lost during tokenization".into())?;
    let shape = ModelShape { vocab_size: vocab.len(), dim: tc.hidden_dim, bos: vocab.bos(), eos: vocab.eos() };
    let mut policy = PolicyParams::new(shape, tc.seed);
    let curve = train_warmup(&mut policy, &tokens, &tc).map_err(err)?;
    let fin = warmup_nll(&policy, &tokens, tc.max_len).map_err(err)?;
    let uniform = tokens.iter().map(|p| p.rewrite.len() as f64).sum::<f64>() / tokens.len() as f64 * (vocab.len() as f64).ln();
    ensure(fin < uniform, || format!("final loss {fin} not below uniform bound {uniform}"))?;
    let mut exact = 0;
    for p in &tokens {
        let out = sample_sequence(&policy, None, &p.question, Decode::Greedy, tc.max_len).map_err(err)?;
        exact += usize::from(out.tokens == p.rewrite);
    }
    let frac = exact as f64 / tokens.len() as f64;
    ensure(frac >= 0.95, || format!("greedy exact reproduction {exact}/20"))?;
    Ok(format!(
        "{exact}/20 exact after {} epochs; loss {:.3} -> {fin:.4} (uniform bound {uniform:.2})",
        curve.len(),
        curve.first().copied().unwrap_or(f64::NAN)
    ))
}

// ---------------------------------------------------------------- 8

fn rl_improvement() -> Outcome {
    let dir = fixtures().join("keyword");
    let cfg = Config::load(&dir.join("config.toml")).map_err(err)?;
    let samples = load_dataset(&dir.join("dataset.jsonl"), TaskKind::OpenQa).map_err(err)?;
    let plain: BTreeMap<String, String> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("rewrites.json")).map_err(err)?).map_err(err)?;
    // warm start: three plain rewrites and one keyword rewrite per question
    let mut pairs = Vec::new();
    for s in &samples {
        let r = plain.get(&s.question).ok_or_else(|| format!("no plain rewrite for {}", s.id))?;
        for rewrite in [r.clone(), r.clone(), r.clone(), format!("wiki {r}")] {
            pairs.push(PseudoPair { sample_id: s.id.clone(), original_question: s.pipeline_text(), rewrite });
        }
    }
    let vocab = Vocab::build(pairs.iter().flat_map(|p| [p.original_question.as_str(), p.rewrite.as_str()]));
    let tc = cfg.train_config();
    ensure(tc.iterations <= 200, || format!("configured for {} iterations", tc.iterations))?;
    let shape = ModelShape { vocab_size: vocab.len(), dim: tc.hidden_dim, bos: vocab.bos(), eos: vocab.eos() };
    let mut anchor = PolicyParams::new(shape, tc.seed);
    train_warmup(&mut anchor, &tokenize_pairs(&pairs, &vocab, tc.max_len), &tc).map_err(err)?;

    let comps = cfg.components(cfg.retrieval, None).map_err(err)?;
    let inputs: Vec<Vec<u32>> = samples.iter().map(|s| vocab.encode(&s.pipeline_text())).collect();
    let eval = |p: &PolicyParams| mean_sampled_reward(p, &inputs, make_env(&comps, &samples, &vocab, &tc), 400, tc.max_len, 99);
    let before = eval(&anchor).map_err(err)?;

    let mut trained = anchor.clone();
    let outcome = train_ppo(&mut trained, &inputs, make_env(&comps, &samples, &vocab, &tc), &tc, |_, _, _| {}).map_err(err)?;
    let after = eval(&trained).map_err(err)?;
    let max_kl = outcome.log.iter().map(|l| l.mean_kl).fold(0.0, f64::max);
    ensure(outcome.log.iter().all(|l| l.mean_kl.is_finite()), || "non-finite KL during training".into())?;
    ensure(after - before >= 0.3, || format!("mean reward {before:.3} -> {after:.3}"))?;

    let strict = TrainConfig { kl_beta: 10.0, ..tc.clone() };
    let mut anchored = anchor.clone();
    let strict_log = train_ppo(&mut anchored, &inputs, make_env(&comps, &samples, &vocab, &strict), &strict, |_, _, _| {}).map_err(err)?;
    ensure(strict_log.log.iter().all(|l| l.mean_kl.is_finite()), || "non-finite KL with beta = 10".into())?;
    let mut agree = 0;
    for x in &inputs {
        let a = sample_sequence(&anchor, None, x, Decode::Greedy, tc.max_len).map_err(err)?;
        let b = sample_sequence(&anchored, None, x, Decode::Greedy, tc.max_len).map_err(err)?;
        agree += usize::from(a.tokens == b.tokens);
    }
    let agreement = agree as f64 / inputs.len() as f64;
    ensure(agreement >= 0.9, || format!("beta = 10 greedy agreement {agree}/{}", inputs.len()))?;
    Ok(format!(
        "reward {before:.3} -> {after:.3} over {} iterations; max mean KL {max_kl:.3}; beta=10 agreement {agree}/{}",
        outcome.log.len(),
        inputs.len()
    ))
}

// ---------------------------------------------------------------- 9

const FILLER: &[&str] = &[
    "river", "stone", "market", "window", "garden", "silver", "engine", "harbor", "lantern", "meadow", "copper", "valley", "thunder",
    "orchard", "canvas", "pillar", "marble", "compass", "feather", "glacier", "timber", "village", "ribbon", "saddle", "beacon",
    "cellar", "island", "mirror", "quarry", "willow",
];
const QUERY_WORDS: &[&str] =
    &["zircon", "quasar", "nebula", "fjord", "tundra", "obsidian", "sextant", "pagoda", "gazelle", "trombone", "vortex", "mangrove"];

fn retriever(fixture: &MockFixture, mode: RetrievalMode, top_k: usize) -> (Retriever, MockServices) {
    let services = MockServices::new(fixture, DEFAULT_BASE);
    let r = Retriever::new(services.search.clone(), Some(services.fetcher.clone()), mode, top_k);
    (r, services)
}

fn oracle_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

/// Every chunk of every page with its brute-force BM25 score.
fn oracle_chunks(pages: &[String], query: &[&str], p: &Bm25Params) -> Vec<(String, f64)> {
    let mut chunks: Vec<String> = Vec::new();
    for page in pages {
        let words: Vec<&str> = page.split_whitespace().collect();
        let mut start = 0;
        while start < words.len() {
            let end = words.len().min(start + p.chunk_size);
            chunks.push(words[start..end].join(" "));
            if end == words.len() {
                break;
            }
            start += p.chunk_stride;
        }
    }
    let toks: Vec<Vec<String>> = chunks.iter().map(|c| oracle_words(c)).collect();
    let n = toks.len() as f64;
    let avg = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut terms: Vec<&str> = query.to_vec();
    terms.sort_unstable();
    terms.dedup();
    chunks
        .into_iter()
        .zip(&toks)
        .map(|(c, t)| {
            let score = terms
                .iter()
                .map(|q| {
                    let tf = t.iter().filter(|w| w.as_str() == *q).count() as f64;
                    let df = toks.iter().filter(|d| d.iter().any(|w| w.as_str() == *q)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    if tf == 0.0 {
                        0.0
                    } else {
                        idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * t.len() as f64 / avg))
                    }
                })
                .sum();
            (c, score)
        })
        .collect()
}

fn filler(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| FILLER[below(rng, FILLER.len())].to_string()).collect()
}

fn planted_fixture() -> (MockFixture, Vec<(String, String)>) {
    // evidence sits well past the snippet window around the first match
    let items = [
        ("nebula", "orion", "Where does the nebula survey point?"),
        ("fjord", "geiranger", "Which fjord did the ferry cross?"),
        ("sextant", "hadley", "Who built the brass sextant?"),
        ("pagoda", "horyuji", "Which pagoda is oldest?"),
        ("mangrove", "sundarbans", "Which mangrove forest is largest?"),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pages = Vec::new();
    let mut qa = Vec::new();
    for (term, gold, question) in items {
        let mut words = vec![term.to_string()];
        words.extend(filler(&mut rng, 40));
        words.extend([term.to_string(), "answer".into(), gold.to_string()]);
        words.extend(filler(&mut rng, 10));
        pages.push(MockPage { url: format!("/planted/{term}"), title: String::new(), body: words.join(" ") });
        qa.push((question.to_string(), gold.to_string()));
    }
    (MockFixture { pages, ..MockFixture::default() }, qa)
}

fn retrieval_ablation() -> Outcome {
    let dir = fixtures().join("mock");
    let cfg = Config::load(&dir.join("config.toml")).map_err(err)?;
    let samples = load_dataset(&dir.join("dataset.jsonl"), TaskKind::OpenQa).map_err(err)?;
    let mut rates = BTreeMap::new();
    for (kind, name) in [(RetrievalKind::Snippet, "snippet"), (RetrievalKind::Bm25, "bm25")] {
        let comps = cfg.components(kind, None).map_err(err)?;
        let report = run_dataset(&samples, PipelineMode::RetrieveThenRead, &comps, &mock_settings(&cfg, name)).map_err(err)?;
        rates.insert(name, report.aggregates.hit_rate.ok_or("no hit rate")?);
    }
    ensure(rates["bm25"] >= rates["snippet"], || format!("mock fixture hit rates {rates:?}"))?;

    let (fixture, qa) = planted_fixture();
    let mut planted = BTreeMap::new();
    for (mode, name) in [(RetrievalMode::Snippet, "snippet"), (RetrievalMode::Bm25(Bm25Params::default()), "bm25")] {
        let (r, _services) = retriever(&fixture, mode, 3);
        let mut hits = 0;
        for (q, gold) in &qa {
            let docs = r.retrieve(&[q.as_str()]).map_err(err)?.docs;
            let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
            hits += usize::from(metrics::hit_indicator(&[gold.as_str()], &texts) > 0.0);
        }
        planted.insert(name, hits as f64 / qa.len() as f64);
    }
    ensure(planted["bm25"] >= planted["snippet"], || format!("planted index hit rates {planted:?}"))?;

    let params = Bm25Params::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..100 {
        let mut pool: Vec<&str> = QUERY_WORDS.to_vec();
        let mut query = Vec::new();
        for _ in 0..3 {
            query.push(pool.remove(below(&mut rng, pool.len())));
        }
        let gold = format!("marker{trial}");
        // the gold sits between query terms, so any chunk holding every term holds it
        let span: Vec<String> = vec![query[0].into(), query[1].into(), gold.clone(), query[2].into()];
        let len = 150 + below(&mut rng, 451);
        let mut body = filler(&mut rng, len);
        let at = below(&mut rng, body.len() + 1);
        body.splice(at..at, span.iter().cloned());
        let mut pages = vec![MockPage { url: format!("/p/{trial}/planted"), title: String::new(), body: body.join(" ") }];
        for d in 0..1 + below(&mut rng, 3) {
            let len = 150 + below(&mut rng, 451);
            let mut words = filler(&mut rng, len);
            let at = below(&mut rng, words.len() + 1);
            words.insert(at, query[below(&mut rng, 3)].to_string());
            pages.push(MockPage { url: format!("/p/{trial}/d{d}"), title: String::new(), body: words.join(" ") });
        }
        let rot = below(&mut rng, pages.len());
        pages.rotate_left(rot);
        let fixture = MockFixture { pages, ..MockFixture::default() };
        let (r, services) = retriever(&fixture, RetrievalMode::Bm25(params), fixture.pages.len());
        let q = query.join(" ");
        let docs = r.retrieve(&[q.as_str()]).map_err(err)?.docs;
        let top = docs.first().ok_or_else(|| format!("trial {trial}: no documents"))?;
        let planted_text = span.join(" ");
        ensure(top.text.contains(&planted_text), || format!("trial {trial}: top chunk {} misses the planted span", top.id))?;

        let texts: Vec<String> = fixture
            .pages
            .iter()
            .map(|p| services.fetcher.fetch_text(&format!("{DEFAULT_BASE}{}", p.url)))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let scored = oracle_chunks(&texts, &query, &params);
        let best = scored.iter().map(|(_, s)| *s).fold(f64::MIN, f64::max);
        ensure((top.score - best).abs() <= 1e-9 * best.abs().max(1.0), || format!("trial {trial}: top score {} vs oracle {best}", top.score))?;
        for (c, s) in &scored {
            if (s - best).abs() <= 1e-9 * best.abs().max(1.0) {
                ensure(c.contains(&planted_text), || format!("trial {trial}: an oracle-best chunk lacks the planted span"))?;
            }
        }
    }
    Ok(format!(
        "fixture hit rate snippet {:.1} / bm25 {:.1}; planted index {:.0}% / {:.0}%; 100 plantings rank first",
        rates["snippet"],
        rates["bm25"],
        100.0 * planted["snippet"],
        100.0 * planted["bm25"]
    ))
}

// ---------------------------------------------------------------- 10

fn prompt_pinning() -> Outcome {
    let dir = fixtures().join("prompts");
    let demos = Demonstrations::builtin();
    let x = "Who wrote the novel Frankenstein?";
    let mc = "Which planet is known as the Red Planet? A. Venus B. Mars C. Jupiter D. Saturn";
    let docs = ["Frankenstein is an 1818 novel by Mary Shelley.", "Mary Shelley was an English novelist."];
    let rendered = [
        ("reader.txt", build_reader_prompt::<&str>(x, &[], &demos.reader)),
        ("reader_with_docs.txt", build_reader_prompt(x, &docs, &demos.reader)),
        ("rewriter_open_qa.txt", build_rewriter_prompt(x, TaskKind::OpenQa, demos.rewriter(TaskKind::OpenQa))),
        ("rewriter_multi_choice.txt", build_rewriter_prompt(mc, TaskKind::MultiChoice, demos.rewriter(TaskKind::MultiChoice))),
    ];
    for (file, text) in &rendered {
        let pinned = std::fs::read(dir.join(file)).map_err(|e| format!("{file}: {e}"))?;
        ensure(pinned == text.as_bytes(), || format!("{file} differs from the rendered prompt"))?;
    }

    let config = PropConfig { cases: 1000, failure_persistence: None, ..PropConfig::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let strategy = ("[^*]{0,40}", prop::collection::vec("[^*;]{0,12}", 0..5), "\\PC{0,30}");
    runner
        .run(&strategy, |(answer, queries, tail)| {
            prop_assert_eq!(parse_answer(&format!("{answer}**{tail}")), answer.trim());
            prop_assert_eq!(parse_answer(&answer), answer.trim());
            let expected: Vec<&str> = queries.iter().map(|q| q.trim()).filter(|q| !q.is_empty()).collect();
            prop_assert_eq!(parse_queries(&format!("{}**{tail}", queries.join(";"))), expected);
            prop_assert!(!parse_answer(&tail).contains("**"));
            for q in parse_queries(&tail) {
                prop_assert!(!q.is_empty() && !q.contains(';') && q.trim() == q);
            }
            Ok(())
        })
        .map_err(|e| format!("fuzz: {e}"))?;
    Ok("4 templates byte-identical; 1000 fuzz cases".into())
}

// ---------------------------------------------------------------- 11

fn determinism() -> Outcome {
    let dir = fixtures().join("mock");
    let cfg = Config::load(&dir.join("config.toml")).map_err(err)?;
    let dataset = dir.join("dataset.jsonl");
    let tmp = tempfile::tempdir().map_err(err)?;

    let samples = load_dataset(&dataset, TaskKind::OpenQa).map_err(err)?;
    let vocab = Vocab::build(samples.iter().map(|s| s.question.as_str()));
    let shape = ModelShape { vocab_size: vocab.len(), dim: 8, bos: vocab.bos(), eos: vocab.eos() };
    let policy = PolicyParams::new(shape, 21);
    let mut value = ValueParams::from_policy(&policy);
    value.head_w.data.iter_mut().enumerate().for_each(|(i, w)| *w = (i as f64 * 0.37).sin() * 1e-3 + f64::EPSILON);
    let ckpt = Checkpoint { vocab, max_len: 12, policy, value: Some(value) };
    let bytes = ckpt.to_bytes().map_err(err)?;
    let back = Checkpoint::from_bytes(&bytes).map_err(err)?;
    ensure(back == ckpt && back.to_bytes().map_err(err)? == bytes, || "in-memory checkpoint round trip".into())?;
    let ckpt_path = tmp.path().join("policy.ckpt");
    ckpt.save(&ckpt_path).map_err(err)?;
    let loaded = Checkpoint::load(&ckpt_path).map_err(err)?;
    ensure(loaded.to_bytes().map_err(err)? == bytes, || "file checkpoint round trip".into())?;

    let mut runs = 0;
    for mode in PipelineMode::ALL {
        for kind in [RetrievalKind::Snippet, RetrievalKind::Bm25] {
            if mode == PipelineMode::DirectReader && kind == RetrievalKind::Bm25 {
                continue;
            }
            let ck = (mode == PipelineMode::TrainedRewriter).then_some(ckpt_path.as_path());
            let mut outputs = Vec::new();
            for par in [1, 8] {
                let out = tmp.path().join(format!("{}-{kind:?}-{par}", mode.name()));
                rrr::cli::eval(&dataset, mode, Some(kind), &cfg, &out, ck, Some(par)).map_err(|e| e.message().to_string())?;
                let mut report: serde_json::Value =
                    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).map_err(err)?).map_err(err)?;
                report.as_object_mut().ok_or("report is not an object")?.remove("timestamp");
                let records = std::fs::read(out.join("records.jsonl")).map_err(err)?;
                outputs.push((report, records));
            }
            ensure(outputs[0] == outputs[1], || format!("{} / {kind:?}: parallelism 1 and 8 differ", mode.name()))?;
            runs += 1;
        }
    }
    Ok(format!("{runs} mode/retrieval pairs identical at parallelism 1 and 8; checkpoint bytes round-trip"))
}
