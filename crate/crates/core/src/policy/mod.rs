//! Log-linear autoregressive policy.
//!
//! The next-token score of candidate `v` is the sum of the weights
//! `w[(context, v)]` over the contexts active at the current state, and the
//! distribution is the softmax of those scores over the allowed tokens. All
//! weights start at zero, so a fresh policy is uniform.

mod checkpoint;
mod features;
mod seq;
mod tabular;
mod vocab;

use std::collections::HashMap;
use std::sync::Arc;

pub use features::{Context, Cursor, FeatureExtractor, PromptView, Template};
pub use seq::{
    draw, enumerate, kl_exact, kl_monte_carlo, kl_to_ref, log_softmax, log_sum_exp, logprob, mean_stderr, sample,
    sample_with, token_kl, KlEstimate, KlMethod, SequenceModel, ENUM_CAP,
};
pub use tabular::TabularPolicy;
pub use vocab::{TokenId, TokenKind, Vocab, BEGIN, END};

use crate::error::{domain, Error, Result};

/// Default cap on generated tokens.
pub const DEFAULT_HORIZON: usize = 256;
/// Default evaluation temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Sparse table `context -> per-candidate values`, used for weights and gradients.
pub type WeightTable = HashMap<Context, Vec<f64>>;

/// Gradient (or any update direction) over policy weights.
#[derive(Debug, Clone, Default)]
pub struct SparseGrad {
    rows: WeightTable,
}

impl SparseGrad {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, ctx: &Context, token: TokenId) -> f64 {
        self.rows.get(ctx).map_or(0.0, |r| r[token as usize])
    }

    pub fn rows(&self) -> &WeightTable {
        &self.rows
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|g| g.is_finite())
    }

    fn row(&mut self, ctx: Context, width: usize) -> &mut Vec<f64> {
        self.rows.entry(ctx).or_insert_with(|| vec![0.0; width])
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &SparseGrad, scale: f64) {
        for (ctx, row) in &other.rows {
            let dst = self.row(*ctx, row.len());
            for (d, g) in dst.iter_mut().zip(row) {
                *d += scale * g;
            }
        }
    }
}

/// Role of an MLE batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Pretrain,
    Sft,
}

/// Prompt/target pairs for maximum likelihood; targets end with the end token.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    instances: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    role: Role,
}

impl TrainBatch {
    pub fn new(instances: Vec<(Vec<TokenId>, Vec<TokenId>)>, role: Role, end: TokenId) -> Result<Self> {
        if instances.is_empty() {
            return Err(domain("training batch is empty"));
        }
        if let Some(i) = instances.iter().position(|(_, t)| t.last() != Some(&end)) {
            return Err(domain(format!("target {i} does not end with the end marker")));
        }
        Ok(Self { instances, role })
    }

    pub fn instances(&self) -> &[(Vec<TokenId>, Vec<TokenId>)] {
        &self.instances
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    vocab: Arc<Vocab>,
    extractor: FeatureExtractor,
    weights: WeightTable,
    allowed: Vec<bool>,
    horizon: usize,
    pub temperature: f64,
    pub stage: String,
}

impl Policy {
    /// Zero weights; every token but the begin marker is allowed.
    pub fn new(vocab: Arc<Vocab>, extractor: FeatureExtractor) -> Self {
        let mut allowed = vec![true; vocab.len()];
        allowed[vocab.begin() as usize] = false;
        Self {
            vocab,
            extractor,
            weights: HashMap::new(),
            allowed,
            horizon: DEFAULT_HORIZON,
            temperature: DEFAULT_TEMPERATURE,
            stage: "init".into(),
        }
    }

    /// Restricts candidates to `tokens`; everything else has probability 0 at
    /// every state. The end token is still forced once the horizon is reached.
    pub fn with_allowed(mut self, tokens: &[TokenId]) -> Result<Self> {
        if tokens.is_empty() {
            return Err(domain("at least one token must be allowed"));
        }
        let mut allowed = vec![false; self.vocab.len()];
        for &t in tokens {
            *allowed.get_mut(t as usize).ok_or_else(|| domain(format!("token id {t} outside vocabulary")))? = true;
        }
        self.allowed = allowed;
        Ok(self)
    }

    /// Maximum number of tokens before the end token; must be at least 1.
    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(domain("horizon must be at least 1"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_allowed(&self, token: TokenId) -> bool {
        self.allowed.get(token as usize).copied().unwrap_or(false)
    }

    pub fn weights(&self) -> &WeightTable {
        &self.weights
    }

    pub fn weight(&self, ctx: &Context, token: TokenId) -> f64 {
        self.weights.get(ctx).map_or(0.0, |r| r[token as usize])
    }

    pub fn set_weight(&mut self, ctx: Context, token: TokenId, value: f64) {
        let n = self.vocab.len();
        self.weights.entry(ctx).or_insert_with(|| vec![0.0; n])[token as usize] = value;
    }

    /// Number of non-zero weights.
    pub fn num_weights(&self) -> usize {
        self.weights.values().flatten().filter(|w| **w != 0.0).count()
    }

    /// `w += step * grad` on allowed candidates.
    pub fn apply(&mut self, grad: &SparseGrad, step: f64) {
        if step == 0.0 {
            return;
        }
        let n = self.vocab.len();
        for (ctx, row) in &grad.rows {
            let w = self.weights.entry(*ctx).or_insert_with(|| vec![0.0; n]);
            for (v, g) in row.iter().enumerate() {
                if self.allowed[v] {
                    w[v] += step * g;
                }
            }
        }
    }

    /// Multiplies every weight by `factor`.
    pub fn scale_weights(&mut self, factor: f64) {
        for w in self.weights.values_mut().flatten() {
            *w *= factor;
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        self.vocab.tokenize(text)
    }

    /// Log-probabilities at `cursor`, writing the active contexts into `ctxs`.
    fn step_log_probs(&self, cursor: &Cursor, ctxs: &mut Vec<Context>) -> Vec<f64> {
        let n = self.vocab.len();
        if cursor.len() >= self.horizon {
            ctxs.clear();
            let mut out = vec![f64::NEG_INFINITY; n];
            out[self.vocab.end() as usize] = 0.0;
            return out;
        }
        self.extractor.contexts(cursor, ctxs);
        let mut scores = vec![0.0; n];
        for ctx in ctxs.iter() {
            if let Some(row) = self.weights.get(ctx) {
                for (s, w) in scores.iter_mut().zip(row) {
                    *s += w;
                }
            }
        }
        for (s, ok) in scores.iter_mut().zip(&self.allowed) {
            if !ok {
                *s = f64::NEG_INFINITY;
            }
        }
        log_softmax(&mut scores);
        scores
    }

    /// Adds `scale * d log p(completion + end | prompt) / dw` to `grad` and
    /// returns the log-probability.
    pub fn accumulate_logprob_grad(
        &self,
        prompt: &[TokenId],
        completion: &[TokenId],
        scale: f64,
        grad: &mut SparseGrad,
    ) -> Result<f64> {
        let end = self.vocab.end();
        let tokens: Vec<TokenId> = completion.iter().copied().chain(std::iter::once(end)).collect();
        self.accumulate_tokens_grad(prompt, &tokens, scale, grad)
    }

    /// Same as [`Policy::accumulate_logprob_grad`] for a token list that already ends with the end token.
    fn accumulate_tokens_grad(&self, prompt: &[TokenId], tokens: &[TokenId], scale: f64, grad: &mut SparseGrad) -> Result<f64> {
        let mut cursor = Cursor::new(&self.vocab, prompt);
        let mut total = 0.0;
        for &y in tokens {
            total += self.accumulate_step_grad(&cursor, y, scale, grad)?;
            cursor.push(&self.vocab, y);
        }
        Ok(total)
    }

    /// Adds `scale * d log p(y | cursor) / dw` to `grad` and returns `log p(y | cursor)`.
    pub fn accumulate_step_grad(&self, cursor: &Cursor, y: TokenId, scale: f64, grad: &mut SparseGrad) -> Result<f64> {
        let n = self.vocab.len();
        if y as usize >= n {
            return Err(domain(format!("token id {y} outside vocabulary")));
        }
        let mut ctxs = Vec::new();
        let lp = self.step_log_probs(cursor, &mut ctxs);
        if scale != 0.0 && !ctxs.is_empty() {
            let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            for ctx in &ctxs {
                let row = grad.row(*ctx, n);
                for (v, p) in probs.iter().enumerate() {
                    if *p > 0.0 {
                        row[v] -= scale * p;
                    }
                }
                row[y as usize] += scale;
            }
        }
        Ok(lp[y as usize])
    }

    /// Adds `scale * d KL(self(.|s) || reference(.|s)) / dw` for one state to
    /// `grad` and returns the KL. `ref_lp` are the reference log-probabilities.
    pub fn accumulate_token_kl_grad(
        &self,
        cursor: &Cursor,
        ref_lp: &[f64],
        scale: f64,
        grad: &mut SparseGrad,
    ) -> f64 {
        let n = self.vocab.len();
        let mut ctxs = Vec::new();
        let lp = self.step_log_probs(cursor, &mut ctxs);
        let kl = token_kl(&lp, ref_lp);
        if ctxs.is_empty() || scale == 0.0 {
            return kl;
        }
        // d/dz_v sum_u p_u (log p_u - log r_u) = p_v (log p_v - log r_v - KL)
        let g: Vec<f64> = lp
            .iter()
            .zip(ref_lp)
            .map(|(l, r)| if *l == f64::NEG_INFINITY { 0.0 } else { l.exp() * (l - r - kl) })
            .collect();
        for ctx in &ctxs {
            let row = grad.row(*ctx, n);
            for (d, gv) in row.iter_mut().zip(&g) {
                *d += scale * gv;
            }
        }
        kl
    }

    /// Sequence log-probability of a token list ending with the end token.
    pub fn tokens_logprob(&self, prompt: &[TokenId], tokens: &[TokenId]) -> Result<f64> {
        self.accumulate_tokens_grad(prompt, tokens, 0.0, &mut SparseGrad::new())
    }

    /// Mean negative log-likelihood of the batch targets.
    pub fn mean_nll(&self, batch: &TrainBatch) -> Result<f64> {
        let mut total = 0.0;
        for (p, t) in &batch.instances {
            total -= self.tokens_logprob(p, t)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean NLL and the gradient of the mean log-likelihood (the ascent direction).
    pub fn likelihood_gradient(&self, batch: &TrainBatch) -> Result<(f64, SparseGrad)> {
        let scale = 1.0 / batch.len() as f64;
        let mut grad = SparseGrad::new();
        let mut nll = 0.0;
        for (i, (p, t)) in batch.instances.iter().enumerate() {
            let lp = self.accumulate_tokens_grad(p, t, scale, &mut grad)?;
            if !lp.is_finite() {
                return Err(Error::Training(format!("instance {i} has non-finite log-likelihood {lp}")));
            }
            nll -= lp;
        }
        if !grad.is_finite() {
            return Err(Error::Training("non-finite gradient in batch".into()));
        }
        Ok((nll / batch.len() as f64, grad))
    }
}

/// One gradient step on the mean negative log-likelihood; returns the mean
/// NLL before the update.
pub fn mle_step(policy: &mut Policy, batch: &TrainBatch, lr: f64) -> Result<f64> {
    mle_step_decayed(policy, batch, lr, 0.0)
}

/// [`mle_step`] with decoupled L2 shrinkage `w *= 1 - lr * weight_decay` before the update.
pub fn mle_step_decayed(policy: &mut Policy, batch: &TrainBatch, lr: f64, weight_decay: f64) -> Result<f64> {
    if !(lr >= 0.0) || !(weight_decay >= 0.0) {
        return Err(domain("learning rate and weight decay must be non-negative"));
    }
    let (nll, grad) = policy.likelihood_gradient(batch)?;
    if weight_decay > 0.0 && lr > 0.0 {
        policy.scale_weights(1.0 - lr * weight_decay);
    }
    policy.apply(&grad, lr);
    Ok(nll)
}

impl SequenceModel for Policy {
    type State = Cursor;

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn end_token(&self) -> TokenId {
        self.vocab.end()
    }

    fn start(&self, prompt: &[TokenId]) -> Cursor {
        Cursor::new(&self.vocab, prompt)
    }

    fn advance(&self, state: &mut Cursor, token: TokenId) {
        state.push(&self.vocab, token);
    }

    fn next_log_probs(&self, state: &Cursor) -> Vec<f64> {
        self.step_log_probs(state, &mut Vec::new())
    }

    fn space_size(&self) -> u128 {
        let end = self.vocab.end() as usize;
        let a = self.allowed.iter().enumerate().filter(|(i, ok)| **ok && *i != end).count() as u128;
        let mut total: u128 = 0;
        let mut pow: u128 = 1;
        for _ in 0..self.horizon {
            if self.allowed[end] {
                total = total.saturating_add(pow);
            }
            pow = pow.saturating_mul(a);
            if pow == u128::MAX {
                return u128::MAX;
            }
        }
        total.saturating_add(pow)
    }
}

#[cfg(test)]
mod tests;
