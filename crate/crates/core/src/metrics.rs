//! Exact match, character-level BLEU and dataset evaluation.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::{self, Policy, DEFAULT_HORIZON};
use crate::reward::normalize;
use crate::seed;
use crate::taskgen::Instance;

/// Smoothing mass for n-gram orders with no match.
pub const BLEU_EPS: f64 = 1e-9;
pub const BLEU_MAX_ORDER: usize = 4;

/// 1 iff the strings are equal after trailing-whitespace normalization.
pub fn exact_match(pred: &str, gold: &str) -> u8 {
    u8::from(normalize(pred) == normalize(gold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BleuScore {
    pub value: f64,
    /// Set when the reference was empty; the score is then 0.
    pub empty_gold: bool,
}

/// Character-level BLEU: clipped n-gram precisions for orders
/// `1..=min(4, |pred|)`, geometric mean with uniform weights, brevity penalty
/// `exp(1 - |gold|/|pred|)` when the prediction is shorter. An order with no
/// clipped match contributes `1e-9 / count` instead of zero.
pub fn bleu_score(pred: &str, gold: &str) -> BleuScore {
    let c: Vec<char> = pred.chars().collect();
    let r: Vec<char> = gold.chars().collect();
    if r.is_empty() {
        return BleuScore { value: 0.0, empty_gold: true };
    }
    if c.is_empty() {
        return BleuScore { value: 0.0, empty_gold: false };
    }
    let orders = BLEU_MAX_ORDER.min(c.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let mut gold_counts: HashMap<&[char], usize> = HashMap::new();
        for g in r.windows(n) {
            *gold_counts.entry(g).or_default() += 1;
        }
        let mut pred_counts: HashMap<&[char], usize> = HashMap::new();
        for g in c.windows(n) {
            *pred_counts.entry(g).or_default() += 1;
        }
        let total = c.len() - n + 1;
        let matched: usize = pred_counts.iter().map(|(g, k)| (*k).min(gold_counts.get(g).copied().unwrap_or(0))).sum();
        let p = if matched == 0 { BLEU_EPS / total as f64 } else { matched as f64 / total as f64 };
        log_sum += p.ln();
    }
    let bp = if c.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
    BleuScore { value: bp * (log_sum / orders as f64).exp(), empty_gold: false }
}

pub fn bleu(pred: &str, gold: &str) -> f64 {
    bleu_score(pred, gold).value
}

/// Decoding settings for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub nucleus_p: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { temperature: 0.1, nucleus_p: 0.8, max_len: DEFAULT_HORIZON, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitStats {
    pub n: usize,
    pub em: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub exact_match: f64,
    pub bleu: f64,
    pub per_split: BTreeMap<String, SplitStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceResult {
    pub prompt: String,
    pub target: String,
    pub response: String,
    pub split: String,
    pub em: u8,
    pub bleu: f64,
}

impl EvalReport {
    /// Aggregates per-instance results; sums are taken before dividing so the
    /// report does not depend on instance order beyond float rounding.
    pub fn from_results(results: &[InstanceResult]) -> Self {
        let mut sums: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
        for r in results {
            let e = sums.entry(r.split.clone()).or_default();
            e.0 += 1;
            e.1 += f64::from(r.em);
            e.2 += r.bleu;
        }
        let mut report = EvalReport { n: results.len(), ..Default::default() };
        let (mut em, mut bl) = (0.0, 0.0);
        for (split, (n, e, b)) in sums {
            em += e;
            bl += b;
            report.per_split.insert(split, SplitStats { n, em: e / n as f64, bleu: b / n as f64 });
        }
        if report.n > 0 {
            report.exact_match = em / report.n as f64;
            report.bleu = bl / report.n as f64;
        }
        report
    }
}

/// Decodes one instance. The sampling seed depends on the prompt text, not on
/// the instance's position in the dataset.
pub fn decode(policy: &Policy, inst: &Instance, cfg: &DecodeConfig) -> Result<String> {
    let prompt = policy.tokenize(&inst.prompt_text)?;
    let s = seed::stream(cfg.seed, &inst.prompt_text);
    let y = policy::sample(policy, &prompt, cfg.max_len, cfg.temperature, cfg.nucleus_p, s);
    Ok(policy.vocab().detokenize(&y))
}

pub fn evaluate_detailed(policy: &Policy, data: &[Instance], cfg: &DecodeConfig) -> Result<Vec<InstanceResult>> {
    data.par_iter()
        .map(|inst| {
            let response = decode(policy, inst, cfg)?;
            Ok(InstanceResult {
                em: exact_match(&response, &inst.target_text),
                bleu: bleu(&response, &inst.target_text),
                prompt: inst.prompt_text.clone(),
                target: inst.target_text.clone(),
                split: inst.split.name().to_string(),
                response,
            })
        })
        .collect()
}

pub fn evaluate(policy: &Policy, data: &[Instance], cfg: &DecodeConfig) -> Result<EvalReport> {
    Ok(EvalReport::from_results(&evaluate_detailed(policy, data, cfg)?))
}
