//! Algorithms shared by every autoregressive model: sequence log-probability,
//! sampling, exhaustive enumeration and KL divergence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::vocab::TokenId;
use crate::error::{domain, Error, Result};
use crate::seed;

/// Default limit on the number of completions enumerated exactly.
pub const ENUM_CAP: u128 = 1_000_000;

/// An autoregressive distribution over completions that end with an end token.
pub trait SequenceModel: Sync {
    type State: Clone + Send;

    fn vocab_size(&self) -> usize;
    fn end_token(&self) -> TokenId;
    fn start(&self, prompt: &[TokenId]) -> Self::State;
    fn advance(&self, state: &mut Self::State, token: TokenId);
    /// Next-token log-probabilities; excluded tokens get `-inf`.
    fn next_log_probs(&self, state: &Self::State) -> Vec<f64>;
    /// Upper bound on the number of distinct completions, saturating.
    fn space_size(&self) -> u128;
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// In-place log-softmax.
pub fn log_softmax(xs: &mut [f64]) {
    let z = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x -= z;
    }
}

/// `sum_v p(v) (log p(v) - log q(v))` for one next-token pair.
pub fn token_kl(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .filter(|(p, _)| **p > f64::NEG_INFINITY)
        .map(|(p, q)| p.exp() * (p - q))
        .sum::<f64>()
        .max(0.0)
}

fn check_tokens<M: SequenceModel>(model: &M, tokens: &[TokenId]) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= model.vocab_size()) {
        Some(t) => Err(domain(format!("token id {t} outside vocabulary of {}", model.vocab_size()))),
        None => Ok(()),
    }
}

/// Log-probability of `completion` followed by the end token.
pub fn logprob<M: SequenceModel>(model: &M, prompt: &[TokenId], completion: &[TokenId]) -> Result<f64> {
    check_tokens(model, prompt)?;
    check_tokens(model, completion)?;
    let mut state = model.start(prompt);
    let mut total = 0.0;
    for &t in completion.iter().chain(std::iter::once(&model.end_token())) {
        total += model.next_log_probs(&state)[t as usize];
        if total == f64::NEG_INFINITY {
            return Ok(total);
        }
        model.advance(&mut state, t);
    }
    Ok(total)
}

/// Draws one index from log-probabilities at `temperature` with nucleus
/// truncation at `nucleus_p`. A non-positive temperature picks the argmax.
pub fn draw(lp: &[f64], temperature: f64, nucleus_p: f64, rng: &mut ChaCha8Rng) -> TokenId {
    if temperature <= 0.0 {
        return argmax(lp);
    }
    let scaled: Vec<f64> = lp.iter().map(|l| l / temperature).collect();
    let z = log_sum_exp(&scaled);
    let mut order: Vec<(usize, f64)> =
        scaled.iter().enumerate().map(|(i, s)| (i, (s - z).exp())).filter(|(_, p)| *p > 0.0).collect();
    if order.is_empty() {
        return argmax(lp);
    }
    if nucleus_p < 1.0 {
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut cum = 0.0;
        let mut keep = order.len();
        for (i, (_, p)) in order.iter().enumerate() {
            cum += p;
            if cum >= nucleus_p {
                keep = i + 1;
                break;
            }
        }
        order.truncate(keep);
    }
    let total: f64 = order.iter().map(|(_, p)| p).sum();
    let mut u = rng.gen::<f64>() * total;
    for &(i, p) in &order {
        if u < p {
            return i as TokenId;
        }
        u -= p;
    }
    order.last().expect("non-empty").0 as TokenId
}

fn argmax(lp: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, l) in lp.iter().enumerate() {
        if *l > lp[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Autoregressive draw, stopping at the end token (not included) or after `max_len` tokens.
pub fn sample_with<M: SequenceModel>(
    model: &M,
    prompt: &[TokenId],
    max_len: usize,
    temperature: f64,
    nucleus_p: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<TokenId> {
    let mut state = model.start(prompt);
    let mut out = Vec::new();
    while out.len() < max_len {
        let t = draw(&model.next_log_probs(&state), temperature, nucleus_p, rng);
        if t == model.end_token() {
            break;
        }
        model.advance(&mut state, t);
        out.push(t);
    }
    out
}

pub fn sample<M: SequenceModel>(
    model: &M,
    prompt: &[TokenId],
    max_len: usize,
    temperature: f64,
    nucleus_p: f64,
    seed: u64,
) -> Vec<TokenId> {
    sample_with(model, prompt, max_len, temperature, nucleus_p, &mut seed::rng(seed))
}

/// Every completion with non-zero probability and its log-probability, in
/// depth-first token order.
pub fn enumerate<M: SequenceModel>(model: &M, prompt: &[TokenId], cap: u128) -> Result<Vec<(Vec<TokenId>, f64)>> {
    let size = model.space_size();
    if size > cap {
        return Err(Error::Capacity { size, cap });
    }
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    dfs(model, model.start(prompt), 0.0, &mut prefix, &mut out);
    Ok(out)
}

fn dfs<M: SequenceModel>(
    model: &M,
    state: M::State,
    acc: f64,
    prefix: &mut Vec<TokenId>,
    out: &mut Vec<(Vec<TokenId>, f64)>,
) {
    let lp = model.next_log_probs(&state);
    for (t, l) in lp.iter().enumerate() {
        if *l == f64::NEG_INFINITY {
            continue;
        }
        let t = t as TokenId;
        if t == model.end_token() {
            out.push((prefix.clone(), acc + l));
            continue;
        }
        let mut next = state.clone();
        model.advance(&mut next, t);
        prefix.push(t);
        dfs(model, next, acc + l, prefix, out);
        prefix.pop();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlMethod {
    #[default]
    Exact,
    MonteCarlo,
}

/// A KL value with its standard error (0 when exact).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// `KL(p || q)` over completions of `prompt`, by enumeration of `p`'s support.
pub fn kl_exact<P: SequenceModel, Q: SequenceModel>(p: &P, q: &Q, prompt: &[TokenId], cap: u128) -> Result<f64> {
    if p.vocab_size() != q.vocab_size() {
        return Err(domain("policies have different vocabularies"));
    }
    let mut total = 0.0;
    for (y, lp) in enumerate(p, prompt, cap)? {
        let lq = logprob(q, prompt, &y)?;
        total += lp.exp() * (lp - lq);
    }
    Ok(total.max(0.0))
}

/// Per-token expected KL summed along `budget` trajectories sampled from `p`.
pub fn kl_monte_carlo<P: SequenceModel, Q: SequenceModel>(
    p: &P,
    q: &Q,
    prompt: &[TokenId],
    budget: usize,
    seed_value: u64,
) -> Result<KlEstimate> {
    if budget == 0 {
        return Err(domain("Monte-Carlo budget must be at least 1"));
    }
    if p.vocab_size() != q.vocab_size() {
        return Err(domain("policies have different vocabularies"));
    }
    let mut values = Vec::with_capacity(budget);
    for i in 0..budget {
        let mut rng = seed::rng_at(seed_value, i as u64);
        let (mut sp, mut sq) = (p.start(prompt), q.start(prompt));
        let mut total = 0.0;
        loop {
            let lp = p.next_log_probs(&sp);
            let lq = q.next_log_probs(&sq);
            total += token_kl(&lp, &lq);
            let t = draw(&lp, 1.0, 1.0, &mut rng);
            if t == p.end_token() {
                break;
            }
            p.advance(&mut sp, t);
            q.advance(&mut sq, t);
        }
        values.push(total);
    }
    let (mean, stderr) = mean_stderr(&values);
    Ok(KlEstimate { value: mean, stderr })
}

pub fn kl_to_ref<P: SequenceModel, Q: SequenceModel>(
    policy: &P,
    reference: &Q,
    prompt: &[TokenId],
    method: KlMethod,
    budget: usize,
    seed_value: u64,
) -> Result<f64> {
    match method {
        KlMethod::Exact => kl_exact(policy, reference, prompt, ENUM_CAP),
        KlMethod::MonteCarlo => Ok(kl_monte_carlo(policy, reference, prompt, budget, seed_value)?.value),
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
