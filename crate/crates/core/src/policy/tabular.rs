use std::collections::HashMap;

use super::seq::SequenceModel;
use super::vocab::TokenId;
use crate::error::{domain, Result};

/// History-indexed next-token table over tokens `0..vocab_size`; every
/// completion has exactly `horizon` tokens, after which the end token
/// (`vocab_size`) is forced. Histories missing from the table are uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab_size: usize,
    horizon: usize,
    table: HashMap<Vec<TokenId>, Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(vocab_size: usize, horizon: usize, table: HashMap<Vec<TokenId>, Vec<f64>>) -> Result<Self> {
        for (hist, row) in &table {
            if hist.len() >= horizon || row.len() != vocab_size {
                return Err(domain("table row does not fit the vocabulary and horizon"));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(domain("table row is not a distribution"));
            }
        }
        Ok(Self { vocab_size, horizon, table })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Linear-space next-token probabilities over `0..vocab_size`.
    pub fn next_probs(&self, history: &[TokenId]) -> Vec<f64> {
        match self.table.get(history) {
            Some(row) => row.clone(),
            None => vec![1.0 / self.vocab_size as f64; self.vocab_size],
        }
    }

    /// Smallest next-token probability over every history.
    pub fn min_token_prob(&self) -> f64 {
        self.table.values().flatten().copied().fold(1.0 / self.vocab_size as f64, f64::min)
    }

    /// Total probability of completions satisfying `pred`, by exhaustive
    /// enumeration in linear space with compensated summation.
    pub fn mass_where(&self, pred: impl Fn(&[TokenId]) -> bool) -> f64 {
        let mut sum = Neumaier::default();
        let mut prefix = Vec::with_capacity(self.horizon);
        self.walk(&mut prefix, 1.0, &pred, &mut sum);
        sum.total()
    }

    fn walk(&self, prefix: &mut Vec<TokenId>, acc: f64, pred: &impl Fn(&[TokenId]) -> bool, sum: &mut Neumaier) {
        if prefix.len() == self.horizon {
            if pred(prefix) {
                sum.add(acc);
            }
            return;
        }
        let row = self.next_probs(prefix);
        for (t, p) in row.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            prefix.push(t as TokenId);
            self.walk(prefix, acc * p, pred, sum);
            prefix.pop();
        }
    }
}

#[derive(Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

impl SequenceModel for TabularPolicy {
    type State = Vec<TokenId>;

    fn vocab_size(&self) -> usize {
        self.vocab_size + 1
    }

    fn end_token(&self) -> TokenId {
        self.vocab_size as TokenId
    }

    fn start(&self, _prompt: &[TokenId]) -> Self::State {
        Vec::new()
    }

    fn advance(&self, state: &mut Self::State, token: TokenId) {
        state.push(token);
    }

    fn next_log_probs(&self, state: &Self::State) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.vocab_size + 1];
        if state.len() >= self.horizon {
            out[self.vocab_size] = 0.0;
        } else {
            for (o, p) in out.iter_mut().zip(self.next_probs(state)) {
                *o = p.ln();
            }
        }
        out
    }

    fn space_size(&self) -> u128 {
        (0..self.horizon).fold(1u128, |acc, _| acc.saturating_mul(self.vocab_size as u128))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::seq::enumerate;

    #[test]
    fn uniform_table_sums_to_one() {
        let p = TabularPolicy::new(3, 3, HashMap::new()).unwrap();
        assert!((p.mass_where(|_| true) - 1.0).abs() < 1e-15);
        let all = enumerate(&p, &[], 1000).unwrap();
        assert_eq!(all.len(), 27);
        let total: f64 = all.iter().map(|(_, l)| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_rows() {
        let mut t = HashMap::new();
        t.insert(vec![], vec![0.5, 0.6]);
        assert!(TabularPolicy::new(2, 2, t).is_err());
    }
}
