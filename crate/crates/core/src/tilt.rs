//! Closed forms for the optimum of the KL-regularized binary-reward objective.
//!
//! Maximizing `E[R] - beta * KL(pi || q)` over distributions on a discrete
//! space gives `pi*(y) = q(y) * exp(R(y) / beta) / Z`. With binary rewards the
//! correct mass moves from `Q` to `f(Q) = aQ / ((1 - Q) + aQ)` with
//! `a = exp(1 / beta)`. Everything here is evaluated in log space where it
//! matters, so token floors raised to long horizons do not underflow.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use crate::error::{domain, Result};
use crate::policy::{TabularPolicy, TokenId};

/// KL coefficient, stored as `beta`; `a = exp(1/beta)` is derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltParams {
    beta: f64,
}

impl TiltParams {
    /// `beta` may be `+inf` (no tilt). Values small enough to overflow `a` are rejected.
    pub fn from_beta(beta: f64) -> Result<Self> {
        if beta.is_nan() || beta <= 0.0 {
            return Err(domain(format!("beta must be positive, got {beta}")));
        }
        if !(1.0 / beta).exp().is_finite() {
            return Err(domain(format!("beta = {beta} overflows the amplification factor")));
        }
        Ok(Self { beta })
    }

    pub fn from_beta_inv(beta_inv: f64) -> Result<Self> {
        if beta_inv.is_nan() || beta_inv < 0.0 {
            return Err(domain(format!("inverse temperature must be non-negative, got {beta_inv}")));
        }
        Self::from_beta(1.0 / beta_inv)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn beta_inv(&self) -> f64 {
        1.0 / self.beta
    }

    /// Amplification factor `a = exp(1/beta)`.
    pub fn a(&self) -> f64 {
        self.beta_inv().exp()
    }
}

fn check_prob(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(domain(format!("probability {q} outside [0, 1]")));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Post-tilt correct mass `f(Q) = aQ / ((1 - Q) + aQ)`.
pub fn tilt_fraction(q: f64, params: TiltParams) -> Result<f64> {
    check_prob(q)?;
    if q == 0.0 || q == 1.0 {
        return Ok(q);
    }
    // f(Q) = sigmoid(log a + logit Q)
    Ok(sigmoid(params.beta_inv() + q.ln() - (-q).ln_1p()))
}

/// `f(Q) - Q`.
pub fn marginal_gain(q: f64, params: TiltParams) -> Result<f64> {
    Ok(tilt_fraction(q, params)? - q)
}

/// `Q(1-Q)(a-1) / (1 + (a-1)Q)`, the rearranged gain; used as a cross-check.
pub fn marginal_gain_closed_form(q: f64, params: TiltParams) -> Result<f64> {
    check_prob(q)?;
    let am1 = params.beta_inv().exp_m1();
    Ok(q * (1.0 - q) * am1 / (1.0 + am1 * q))
}

/// Peak of the marginal gain, `(sqrt(a) - 1) / (a - 1)`, evaluated as
/// `1 / (sqrt(a) + 1)` so that it stays accurate as `a -> 1`.
pub fn gain_threshold(params: TiltParams) -> f64 {
    1.0 / ((0.5 * params.beta_inv()).exp() + 1.0)
}

/// Linear ceiling `(a - 1) Q` on the gain.
pub fn small_mass_bound(q: f64, params: TiltParams) -> Result<f64> {
    check_prob(q)?;
    Ok(params.beta_inv().exp_m1() * q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub q_mass: f64,
    pub tilted_mass: f64,
    pub gain: f64,
    pub linear_bound: f64,
    pub threshold: f64,
}

pub fn bound_report(q: f64, params: TiltParams) -> Result<BoundReport> {
    Ok(BoundReport {
        q_mass: q,
        tilted_mass: tilt_fraction(q, params)?,
        gain: marginal_gain(q, params)?,
        linear_bound: small_mass_bound(q, params)?,
        threshold: gain_threshold(params),
    })
}

/// Reports on the grid `Q = i / grid`, `i = 0..=grid`.
pub fn sweep(params: TiltParams, grid: usize) -> Result<Vec<BoundReport>> {
    if grid == 0 {
        return Err(domain("grid must have at least one interval"));
    }
    (0..=grid).map(|i| bound_report(i as f64 / grid as f64, params)).collect()
}

/// Probabilities over an ordered support of outcome identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    support: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(support: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() {
            return Err(domain("support and probabilities differ in length"));
        }
        if support.iter().collect::<BTreeSet<_>>().len() != support.len() {
            return Err(domain("support has duplicate outcomes"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(domain("probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(domain(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { support, probs })
    }

    /// Normalizes non-negative weights over outcomes `0..n`.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(domain("weights must have a positive finite sum"));
        }
        Self::new((0..weights.len()).collect(), weights.iter().map(|w| w / total).collect())
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob_of(&self, outcome: usize) -> f64 {
        self.support.iter().position(|&s| s == outcome).map_or(0.0, |i| self.probs[i])
    }

    pub fn mass(&self, set: &CorrectSet) -> f64 {
        self.support
            .iter()
            .zip(&self.probs)
            .filter(|(s, _)| set.contains(**s))
            .map(|(_, p)| p)
            .sum()
    }
}

/// Outcomes receiving reward 1.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorrectSet {
    members: BTreeSet<usize>,
}

impl CorrectSet {
    pub fn new(members: impl IntoIterator<Item = usize>) -> Self {
        Self { members: members.into_iter().collect() }
    }

    pub fn contains(&self, outcome: usize) -> bool {
        self.members.contains(&outcome)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_subset_of(&self, dist: &DiscreteDistribution) -> bool {
        self.members.iter().all(|m| dist.support().contains(m))
    }
}

/// Exponentially tilted distribution `q(y) a^[y in C] / Z`, normalized by log-sum-exp.
pub fn tilted_policy(q: &DiscreteDistribution, correct: &CorrectSet, params: TiltParams) -> Result<DiscreteDistribution> {
    if !correct.is_subset_of(q) {
        return Err(domain("correct set is not contained in the support"));
    }
    let bonus = params.beta_inv();
    let logits: Vec<f64> = q
        .support()
        .iter()
        .zip(q.probs())
        .map(|(&s, &p)| if p == 0.0 { f64::NEG_INFINITY } else { p.ln() + if correct.contains(s) { bonus } else { 0.0 } })
        .collect();
    let log_z = crate::policy::log_sum_exp(&logits);
    let probs = logits.iter().map(|l| (l - log_z).exp()).collect();
    DiscreteDistribution::new(q.support().to_vec(), probs)
}

/// `|C| * eta^T`, the correct mass of the token-floor construction.
pub fn worst_case_mass(c_size: usize, eta: f64, horizon: usize) -> Result<f64> {
    check_floor_args(c_size, eta, horizon)?;
    let path = (0..horizon).fold(1.0, |acc, _| acc * eta);
    Ok(c_size as f64 * path)
}

/// Natural log of [`worst_case_mass`], finite even when the mass underflows.
pub fn log_worst_case_mass(c_size: usize, eta: f64, horizon: usize) -> Result<f64> {
    check_floor_args(c_size, eta, horizon)?;
    Ok((c_size as f64).ln() + horizon as f64 * eta.ln())
}

fn check_floor_args(c_size: usize, eta: f64, horizon: usize) -> Result<()> {
    if c_size == 0 {
        return Err(domain("correct set must be non-empty"));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(domain(format!("token floor {eta} outside (0, 1]")));
    }
    if horizon == 0 {
        return Err(domain("horizon must be at least 1"));
    }
    Ok(())
}

/// Smallest inverse temperature whose linear bound admits a gain of `epsilon`
/// on a policy with correct mass `|C| eta^T`: `log(1 + epsilon / (|C| eta^T))`.
pub fn required_beta_inv(epsilon: f64, c_size: usize, eta: f64, horizon: usize) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(domain(format!("epsilon {epsilon} outside (0, 1)")));
    }
    let x = epsilon.ln() - log_worst_case_mass(c_size, eta, horizon)?;
    // log(1 + e^x), stable for large x
    Ok(if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() })
}

/// Tabular policy over `vocab_size` tokens and sequences of exactly `horizon`
/// tokens that gives each gold next-token probability exactly `eta` and every
/// other token at least `eta`.
pub fn build_floor_policy(
    vocab_size: usize,
    eta: f64,
    horizon: usize,
    gold_paths: &[Vec<TokenId>],
) -> Result<TabularPolicy> {
    if vocab_size < 2 {
        return Err(domain("vocabulary needs at least two tokens"));
    }
    if !(eta > 0.0) || eta * vocab_size as f64 > 1.0 + 1e-12 {
        return Err(domain(format!("floor {eta} infeasible for vocabulary of {vocab_size}")));
    }
    let mut prescribed: HashMap<Vec<TokenId>, BTreeSet<TokenId>> = HashMap::new();
    for path in gold_paths {
        if path.len() != horizon {
            return Err(domain(format!("gold path has length {}, expected {horizon}", path.len())));
        }
        if path.iter().any(|&t| t as usize >= vocab_size) {
            return Err(domain("gold path uses a token outside the vocabulary"));
        }
        for t in 0..horizon {
            prescribed.entry(path[..t].to_vec()).or_default().insert(path[t]);
        }
    }
    let mut table = HashMap::new();
    for (history, tokens) in prescribed {
        let k = tokens.len();
        if k == vocab_size && (k as f64 * eta - 1.0).abs() > 1e-12 {
            return Err(domain(format!("every token is gold after {history:?} but {k} x {eta} != 1")));
        }
        let rest = if k == vocab_size { 0.0 } else { (1.0 - k as f64 * eta) / (vocab_size - k) as f64 };
        let row: Vec<f64> =
            (0..vocab_size as TokenId).map(|v| if tokens.contains(&v) { eta } else { rest }).collect();
        table.insert(history, row);
    }
    TabularPolicy::new(vocab_size, horizon, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn p(beta: f64) -> TiltParams {
        TiltParams::from_beta(beta).unwrap()
    }

    /// Two-outcome oracle: multiply the correct mass by `a` and renormalize.
    fn two_outcome(q: f64, a: f64) -> f64 {
        let c = q * a;
        c / (c + (1.0 - q))
    }

    #[test]
    fn fraction_examples() {
        assert_eq!(tilt_fraction(0.0, p(0.3)).unwrap(), 0.0);
        assert_eq!(tilt_fraction(1.0, p(0.3)).unwrap(), 1.0);
        let v = tilt_fraction(0.5, p(1.0)).unwrap();
        assert!((v - two_outcome(0.5, E)).abs() < 1e-15);
        assert!((v - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(tilt_fraction(1.5, p(1.0)).is_err());
        assert!(tilt_fraction(-0.1, p(1.0)).is_err());
    }

    #[test]
    fn gain_examples() {
        assert_eq!(marginal_gain(0.0, p(1.0)).unwrap(), 0.0);
        assert_eq!(marginal_gain(1.0, p(1.0)).unwrap(), 0.0);
        let g = marginal_gain(0.5, p(1.0)).unwrap();
        assert!((g - (E / (1.0 + E) - 0.5)).abs() < 1e-12);
        assert!((g - 0.231_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn gain_forms_agree() {
        for beta in [0.05, 0.3, 1.0, 7.0, 1e4] {
            for i in 0..=200 {
                let q = i as f64 / 200.0;
                let a = marginal_gain(q, p(beta)).unwrap();
                let b = marginal_gain_closed_form(q, p(beta)).unwrap();
                assert!((a - b).abs() < 1e-12, "beta {beta} q {q}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn threshold_examples() {
        let t = gain_threshold(p(1.0));
        assert!((t - (E.sqrt() - 1.0) / (E - 1.0)).abs() < 1e-15);
        assert!((t - 0.377_540_668_798_145_4).abs() < 1e-12);
        // grid argmax lands on the threshold
        let n = 1_000_000;
        let best = (0..=n)
            .map(|i| i as f64 / n as f64)
            .max_by(|a, b| marginal_gain(*a, p(1.0)).unwrap().total_cmp(&marginal_gain(*b, p(1.0)).unwrap()))
            .unwrap();
        assert!((best - t).abs() <= 1.0 / n as f64);
    }

    #[test]
    fn threshold_limits() {
        let mut prev_err = f64::INFINITY;
        for k in 4..=10 {
            let a: f64 = 1.0 + 10f64.powi(-k);
            let t = gain_threshold(TiltParams::from_beta_inv(a.ln()).unwrap());
            let err = (t - 0.5).abs();
            assert!(err <= prev_err);
            assert!(err < 1e-4);
            prev_err = err;
        }
        let a: f64 = 1e6;
        let t = gain_threshold(TiltParams::from_beta_inv(a.ln()).unwrap());
        assert!((t - (a.sqrt() - 1.0) / (a - 1.0)).abs() < 1e-15);
        assert!((t * a.sqrt() - 1.0).abs() < 2e-3);
    }

    #[test]
    fn degenerate_beta() {
        let none = TiltParams::from_beta(f64::INFINITY).unwrap();
        assert_eq!(none.a(), 1.0);
        assert_eq!(tilt_fraction(0.3, none).unwrap(), 0.3);
        assert_eq!(gain_threshold(none), 0.5);
        assert!(TiltParams::from_beta(0.0).is_err());
        assert!(TiltParams::from_beta(-1.0).is_err());
        assert!(TiltParams::from_beta(1e-3).is_err());
    }

    #[test]
    fn small_mass_examples() {
        assert_eq!(small_mass_bound(0.0, p(2.0)).unwrap(), 0.0);
        let b = small_mass_bound(0.5, p(1.0)).unwrap();
        assert!((b - (E - 1.0) * 0.5).abs() < 1e-15);
        assert!((b - 0.859_140_914_229_522_6).abs() < 1e-12);
        assert!(b > marginal_gain(0.5, p(1.0)).unwrap());
        let q = 1e-6;
        let ratio = marginal_gain(q, p(1.0)).unwrap() / small_mass_bound(q, p(1.0)).unwrap();
        assert!((0.99..=1.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn tilted_examples() {
        let q = DiscreteDistribution::from_weights(&[1.0, 1.0]).unwrap();
        let t = tilted_policy(&q, &CorrectSet::new([0]), p(1.0)).unwrap();
        assert!((t.prob_of(0) - two_outcome(0.5, E)).abs() < 1e-15);

        let q = DiscreteDistribution::new(vec![0, 1, 2], vec![0.0, 0.4, 0.6]).unwrap();
        let t = tilted_policy(&q, &CorrectSet::new([0]), p(0.1)).unwrap();
        assert_eq!(t.prob_of(0), 0.0);

        let q = DiscreteDistribution::from_weights(&[0.2, 0.3, 0.5]).unwrap();
        let t = tilted_policy(&q, &CorrectSet::new([0, 1, 2]), p(0.2)).unwrap();
        for (a, b) in t.probs().iter().zip(q.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(tilted_policy(&q, &CorrectSet::new([9]), p(1.0)).is_err());
    }

    #[test]
    fn worst_case_examples() {
        assert_eq!(worst_case_mass(1, 0.5, 3).unwrap(), 0.125);
        assert_eq!(worst_case_mass(1, 0.37, 1).unwrap(), 0.37);
        assert!((worst_case_mass(2, 0.1, 4).unwrap() - 2e-4).abs() < 1e-18);
        assert!(worst_case_mass(0, 0.1, 4).is_err());
        assert!(worst_case_mass(1, 0.0, 4).is_err());
    }

    #[test]
    fn required_beta_examples() {
        let b = required_beta_inv(0.1, 1, 0.5, 3).unwrap();
        assert!((b - 1.8f64.ln()).abs() < 1e-12);
        assert!((b - 0.587_786_664_902_119).abs() < 1e-12);
        // (a - 1) Q = epsilon at exactly this temperature
        let q = worst_case_mass(1, 0.5, 3).unwrap();
        assert!((small_mass_bound(q, TiltParams::from_beta_inv(b).unwrap()).unwrap() - 0.1).abs() < 1e-12);
        // inversion at T = 1
        let (eta, a) = (0.2, 3.0f64);
        let eps = (a - 1.0) * eta;
        assert!((required_beta_inv(eps, 1, eta, 1).unwrap() - a.ln()).abs() < 1e-12);
        let long = required_beta_inv(0.1, 1, 0.5, 20).unwrap();
        assert!((long - (1.0 + 0.1 * 2f64.powi(20)).ln()).abs() < 1e-12);
        assert!((long - 11.56).abs() < 0.01);
    }

    #[test]
    fn required_beta_slope() {
        let (eta, eps) = (0.3, 0.05);
        let slope = required_beta_inv(eps, 1, eta, 201).unwrap() - required_beta_inv(eps, 1, eta, 200).unwrap();
        assert!((slope - (1.0 / eta).ln()).abs() < 1e-9);
        // finite far past the point where eta^T underflows
        assert!(required_beta_inv(eps, 1, eta, 5000).unwrap().is_finite());
    }

    #[test]
    fn floor_policy_validation() {
        assert!(build_floor_policy(4, 0.3, 2, &[vec![0, 1]]).is_err());
        assert!(build_floor_policy(4, 0.1, 2, &[vec![0]]).is_err());
        assert!(build_floor_policy(4, 0.1, 2, &[vec![0, 7]]).is_err());
    }
}
