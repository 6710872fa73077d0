//! Group-relative policy optimization.
//!
//! Each step samples `G` completions per prompt from the current policy,
//! turns binary rewards into group-relative advantages, and ascends the
//! sequence-level clipped surrogate minus `beta` times the KL divergence to a
//! fixed reference policy. With raw advantages, no clipping and exact KL the
//! step is plain stochastic gradient ascent on `E[R] - beta KL(pi || q)`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::metrics;
use crate::policy::{self, Cursor, Policy, SequenceModel, SparseGrad, TokenId, Vocab, ENUM_CAP};
use crate::reward::{verify, RewardMode};
use crate::seed;
use crate::taskgen::Instance;

/// Numerical floor added to the group standard deviation.
pub const STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// `(r - mean) / (population std + 1e-8)`.
    #[default]
    GroupNorm,
    /// `r - mean`.
    Centered,
    /// `r`.
    Raw,
}

impl std::str::FromStr for AdvantageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "group_norm" => Ok(Self::GroupNorm),
            "centered" => Ok(Self::Centered),
            "raw" => Ok(Self::Raw),
            _ => Err(domain(format!("unknown advantage mode {s}"))),
        }
    }
}

/// How the KL penalty and its gradient are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Exact when the completion space fits under the enumeration cap.
    #[default]
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub kl_coeff: f64,
    pub clip_eps: f64,
    pub advantage_mode: AdvantageMode,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub kl_mode: KlMode,
    /// Gradient passes over each batch of rollouts; the ratio only departs
    /// from 1 (and clipping only acts) when this exceeds 1.
    pub inner_epochs: usize,
    pub rollout_temperature: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            kl_coeff: 0.005,
            clip_eps: 0.2,
            advantage_mode: AdvantageMode::GroupNorm,
            lr: 0.01,
            steps: 60,
            seed: 0,
            batch_size: 64,
            warmup_frac: 0.1,
            kl_mode: KlMode::Auto,
            inner_epochs: 1,
            rollout_temperature: 1.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let min_group = if self.advantage_mode == AdvantageMode::Raw { 1 } else { 2 };
        if self.group_size < min_group {
            return Err(domain(format!("group size must be at least {min_group}")));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(domain("KL coefficient must be finite and non-negative"));
        }
        if !(self.clip_eps >= 0.0) {
            return Err(domain("clip epsilon must be non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(domain("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.inner_epochs == 0 {
            return Err(domain("batch size and inner epochs must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(domain("warmup fraction must lie in [0, 1]"));
        }
        if !(self.rollout_temperature > 0.0) {
            return Err(domain("rollout temperature must be positive"));
        }
        Ok(())
    }

    /// Learning rate at `step` under linear warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = (self.warmup_frac * self.steps as f64 - 1e-9).ceil().max(0.0) as usize;
        if warm == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / warm as f64).min(1.0)
        }
    }
}

pub fn compute_advantages(rewards: &[f64], mode: AdvantageMode) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let all_equal = rewards.iter().all(|r| *r == rewards[0]);
    match mode {
        AdvantageMode::Raw => rewards.to_vec(),
        _ if all_equal => vec![0.0; rewards.len()],
        AdvantageMode::Centered => rewards.iter().map(|r| r - mean).collect(),
        AdvantageMode::GroupNorm => {
            let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            rewards.iter().map(|r| (r - mean) / (std + STD_EPS)).collect()
        }
    }
}

/// Scores completions. Rewards are expected in {0, 1}.
pub trait Verifier: Sync {
    fn reward(&self, index: usize, completion: &[TokenId]) -> f64;

    fn exact_match(&self, index: usize, completion: &[TokenId]) -> bool {
        self.reward(index, completion) >= 1.0
    }
}

impl<F: Fn(usize, &[TokenId]) -> f64 + Sync> Verifier for F {
    fn reward(&self, index: usize, completion: &[TokenId]) -> f64 {
        self(index, completion)
    }
}

/// Verifier over task instances; prompt `i` is `instances[i]`.
pub struct TaskVerifier {
    vocab: Arc<Vocab>,
    instances: Vec<Instance>,
    mode: RewardMode,
}

impl TaskVerifier {
    pub fn new(vocab: Arc<Vocab>, instances: Vec<Instance>, mode: RewardMode) -> Self {
        Self { vocab, instances, mode }
    }

    pub fn prompts(&self) -> Result<Vec<Vec<TokenId>>> {
        self.instances.iter().map(|i| self.vocab.tokenize(&i.prompt_text)).collect()
    }
}

impl Verifier for TaskVerifier {
    fn reward(&self, index: usize, completion: &[TokenId]) -> f64 {
        f64::from(verify(&self.instances[index], &self.vocab.detokenize(completion), self.mode))
    }

    fn exact_match(&self, index: usize, completion: &[TokenId]) -> bool {
        metrics::exact_match(&self.vocab.detokenize(completion), &self.instances[index].target_text) == 1
    }
}

/// `G` completions of one prompt with everything needed for the update.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub index: usize,
    pub prompt: Vec<TokenId>,
    pub completions: Vec<Vec<TokenId>>,
    pub rewards: Vec<f64>,
    pub exact: Vec<bool>,
    pub ref_logprobs: Vec<f64>,
    /// Log-probabilities under the policy that generated the rollouts.
    pub cur_logprobs: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub mean_em: f64,
}

/// Samples and scores one group per prompt. `batch` holds (prompt index, tokens).
pub fn collect_rollouts(
    policy: &Policy,
    reference: &Policy,
    batch: &[(usize, &[TokenId])],
    cfg: &GrpoConfig,
    verifier: &dyn Verifier,
    step: usize,
) -> Result<Vec<RolloutGroup>> {
    let root = seed::derive(seed::stream(cfg.seed, "rollout"), step as u64);
    batch
        .par_iter()
        .enumerate()
        .map(|(b, &(index, prompt))| {
            let group_seed = seed::derive(root, b as u64);
            let mut g = RolloutGroup {
                index,
                prompt: prompt.to_vec(),
                completions: Vec::with_capacity(cfg.group_size),
                rewards: Vec::new(),
                exact: Vec::new(),
                ref_logprobs: Vec::new(),
                cur_logprobs: Vec::new(),
                advantages: Vec::new(),
            };
            for i in 0..cfg.group_size {
                let mut rng = seed::rng_at(group_seed, i as u64);
                let y = policy::sample_with(policy, prompt, usize::MAX, cfg.rollout_temperature, 1.0, &mut rng);
                g.rewards.push(verifier.reward(index, &y));
                g.exact.push(verifier.exact_match(index, &y));
                g.cur_logprobs.push(policy::logprob(policy, prompt, &y)?);
                g.ref_logprobs.push(policy::logprob(reference, prompt, &y)?);
                g.completions.push(y);
            }
            g.advantages = compute_advantages(&g.rewards, cfg.advantage_mode);
            Ok(g)
        })
        .collect()
}

fn use_exact_kl(policy: &Policy, cfg: &GrpoConfig) -> Result<bool> {
    let fits = policy.space_size() <= ENUM_CAP;
    match cfg.kl_mode {
        KlMode::Auto => Ok(fits),
        KlMode::Exact if fits => Ok(true),
        KlMode::Exact => Err(Error::Capacity { size: policy.space_size(), cap: ENUM_CAP }),
        KlMode::MonteCarlo => Ok(false),
    }
}

/// Adds `scale * grad KL(policy || reference)` for one prompt by enumeration; returns the KL.
fn exact_kl_grad(policy: &Policy, reference: &Policy, prompt: &[TokenId], scale: f64, grad: &mut SparseGrad) -> Result<f64> {
    let mut kl = 0.0;
    for (y, lp) in policy::enumerate(policy, prompt, ENUM_CAP)? {
        let lq = policy::logprob(reference, prompt, &y)?;
        let w = lp.exp() * (lp - lq);
        kl += w;
        // grad KL = sum_y pi(y) (log pi(y) - log q(y)) grad log pi(y)
        policy.accumulate_logprob_grad(prompt, &y, scale * w, grad)?;
    }
    Ok(kl.max(0.0))
}

/// Adds `scale * ` a single-trajectory estimate of `grad KL` along `y` and
/// returns the summed per-token KL. The estimate is unbiased when `y` is drawn
/// from `policy`: pathwise per-token KL gradients plus the score-function term
/// weighted by the KL still to come.
fn mc_kl_grad(
    policy: &Policy,
    reference: &Policy,
    prompt: &[TokenId],
    y: &[TokenId],
    scale: f64,
    grad: &mut SparseGrad,
) -> Result<f64> {
    let vocab = policy.vocab();
    let tokens: Vec<TokenId> = y.iter().copied().chain(std::iter::once(vocab.end())).collect();
    let mut cursor = policy.start(prompt);
    let mut ref_cursor = reference.start(prompt);
    let mut cursors: Vec<Cursor> = Vec::with_capacity(tokens.len());
    let mut kls = Vec::with_capacity(tokens.len());
    for &t in &tokens {
        let ref_lp = reference.next_log_probs(&ref_cursor);
        kls.push(policy.accumulate_token_kl_grad(&cursor, &ref_lp, scale, grad));
        cursors.push(cursor.clone());
        policy.advance(&mut cursor, t);
        reference.advance(&mut ref_cursor, t);
    }
    let mut to_go = 0.0;
    for i in (0..tokens.len()).rev() {
        if to_go != 0.0 {
            policy.accumulate_step_grad(&cursors[i], tokens[i], scale * to_go, grad)?;
        }
        to_go += kls[i];
    }
    Ok(to_go)
}

/// Ascent direction of the GRPO objective at the current policy for fixed
/// rollouts. Returns the direction, the number of clipped samples and the
/// mean KL estimate.
pub fn surrogate_gradient(
    policy: &Policy,
    reference: &Policy,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<(SparseGrad, usize, f64)> {
    let exact = use_exact_kl(policy, cfg)?;
    let b = groups.len() as f64;
    let mut grad = SparseGrad::new();
    let mut clipped = 0;
    let mut kl_total = 0.0;
    for g in groups {
        let gsize = g.completions.len() as f64;
        for (i, y) in g.completions.iter().enumerate() {
            let a = g.advantages[i];
            if a == 0.0 {
                continue;
            }
            let cur = policy::logprob(policy, &g.prompt, y)?;
            let ratio = (cur - g.cur_logprobs[i]).exp();
            if cfg.clip_eps > 0.0 && ((a > 0.0 && ratio > 1.0 + cfg.clip_eps) || (a < 0.0 && ratio < 1.0 - cfg.clip_eps)) {
                clipped += 1;
                continue;
            }
            policy.accumulate_logprob_grad(&g.prompt, y, a * ratio / (b * gsize), &mut grad)?;
        }
        let kl_scale = -cfg.kl_coeff / b;
        if exact {
            kl_total += exact_kl_grad(policy, reference, &g.prompt, kl_scale, &mut grad)?;
        } else {
            let mut sum = 0.0;
            for y in &g.completions {
                sum += mc_kl_grad(policy, reference, &g.prompt, y, kl_scale / gsize, &mut grad)?;
            }
            kl_total += sum / gsize;
        }
    }
    Ok((grad, clipped, kl_total / b))
}

/// Value of the objective whose gradient [`surrogate_gradient`] returns:
/// clipped surrogate minus `beta` times the exact KL, averaged over groups.
pub fn surrogate_objective(policy: &Policy, reference: &Policy, groups: &[RolloutGroup], cfg: &GrpoConfig) -> Result<f64> {
    let b = groups.len() as f64;
    let mut total = 0.0;
    for g in groups {
        let gsize = g.completions.len() as f64;
        for (i, y) in g.completions.iter().enumerate() {
            let a = g.advantages[i];
            let ratio = (policy::logprob(policy, &g.prompt, y)? - g.cur_logprobs[i]).exp();
            let term = if cfg.clip_eps > 0.0 {
                (ratio * a).min(ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * a)
            } else {
                ratio * a
            };
            total += term / (b * gsize);
        }
        total -= cfg.kl_coeff * policy::kl_exact(policy, reference, &g.prompt, ENUM_CAP)? / b;
    }
    Ok(total)
}

fn group_dump(groups: &[RolloutGroup], vocab: &Vocab) -> String {
    groups
        .iter()
        .map(|g| {
            let ys: Vec<String> = g.completions.iter().map(|y| format!("{:?}", vocab.detokenize(y))).collect();
            format!(
                "prompt {} {:?}: completions [{}] rewards {:?} logprobs {:?} ref {:?}",
                g.index,
                vocab.detokenize(&g.prompt),
                ys.join(", "),
                g.rewards,
                g.cur_logprobs,
                g.ref_logprobs
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// One GRPO update on `batch`; `step` selects the rollout seeds and the warmup factor.
pub fn grpo_step(
    policy: &mut Policy,
    reference: &Policy,
    batch: &[(usize, &[TokenId])],
    cfg: &GrpoConfig,
    verifier: &dyn Verifier,
    step: usize,
) -> Result<StepStats> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(domain("GRPO batch is empty"));
    }
    if policy.vocab().hash() != reference.vocab().hash() {
        return Err(domain("policy and reference use different vocabularies"));
    }
    let groups = collect_rollouts(policy, reference, batch, cfg, verifier, step)?;
    let lr = cfg.lr_at(step);
    let mut clipped = 0;
    let mut mean_kl = 0.0;
    for epoch in 0..cfg.inner_epochs {
        let (grad, c, kl) = surrogate_gradient(policy, reference, &groups, cfg)?;
        if !grad.is_finite() || !kl.is_finite() {
            return Err(Error::Training(format!(
                "non-finite GRPO loss at step {step}\n{}",
                group_dump(&groups, policy.vocab())
            )));
        }
        if epoch == 0 {
            mean_kl = kl;
        }
        clipped += c;
        policy.apply(&grad, lr);
    }
    let n = (groups.len() * cfg.group_size) as f64;
    Ok(StepStats {
        step,
        mean_reward: groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / n,
        mean_kl,
        clip_frac: clipped as f64 / (n * cfg.inner_epochs as f64),
        mean_em: groups.iter().flat_map(|g| &g.exact).filter(|e| **e).count() as f64 / n,
    })
}

/// Runs `cfg.steps` updates over reshuffled passes through `prompts`.
pub fn train(
    policy: &Policy,
    reference: &Policy,
    prompts: &[Vec<TokenId>],
    verifier: &dyn Verifier,
    cfg: &GrpoConfig,
) -> Result<(Policy, Vec<StepStats>)> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(domain("GRPO dataset is empty"));
    }
    let mut current = policy.clone();
    let mut history = Vec::with_capacity(cfg.steps);
    let order_seed = seed::stream(cfg.seed, "order");
    let mut order: Vec<usize> = Vec::new();
    let mut pass = 0u64;
    let per_step = cfg.batch_size.min(prompts.len());
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(per_step);
        while batch.len() < per_step {
            if order.is_empty() {
                order = (0..prompts.len()).collect();
                order.shuffle(&mut seed::rng_at(order_seed, pass));
                order.reverse();
                pass += 1;
            }
            let i = order.pop().expect("refilled");
            batch.push((i, prompts[i].as_slice()));
        }
        let stats = grpo_step(&mut current, reference, &batch, cfg, verifier, step)
            .map_err(|e| Error::AtStep { step, source: Box::new(e) })?;
        history.push(stats);
    }
    Ok((current, history))
}

/// Writes the per-step statistics as CSV.
pub fn write_stats<W: std::io::Write>(history: &[StepStats], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["step", "mean_reward", "mean_kl", "clip_frac", "mean_em"])?;
    for s in history {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}
