//! Binary verifiable rewards and the correct mass `Q(x)` a policy puts on them.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::policy::{self, Policy, SequenceModel, TokenId, ENUM_CAP};
use crate::seed;
use crate::taskgen::{parse_response, Instance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// The whole response must equal the target.
    #[default]
    StrictChain,
    /// Only the final state of a well-formed chain is checked.
    OutcomeOnly,
}

impl std::str::FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "strict" | "strict_chain" => Ok(RewardMode::StrictChain),
            "outcome" | "outcome_only" => Ok(RewardMode::OutcomeOnly),
            _ => Err(domain(format!("unknown reward mode {s}"))),
        }
    }
}

/// Strips trailing spaces, tabs and newlines.
pub fn normalize(text: &str) -> &str {
    text.trim_end_matches([' ', '\t', '\n', '\r'])
}

/// 1 if the response is correct for `inst`, else 0.
pub fn verify(inst: &Instance, response: &str, mode: RewardMode) -> u8 {
    match mode {
        RewardMode::StrictChain => u8::from(normalize(response) == normalize(&inst.target_text)),
        RewardMode::OutcomeOnly => {
            let parsed = parse_response(response);
            let gold = inst.padded_chain();
            u8::from(!parsed.malformed && parsed.chain.last() == gold.last())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MassMethod {
    ExactSingleton,
    ExactEnum,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrectMassReport {
    pub q_mass: f64,
    pub method: MassMethod,
    pub stderr: f64,
    pub n_samples: usize,
}

/// Probability of exactly `gold` followed by the end token.
pub fn singleton_mass<M: SequenceModel>(model: &M, prompt: &[TokenId], gold: &[TokenId]) -> Result<f64> {
    Ok(policy::logprob(model, prompt, gold)?.exp())
}

/// Total probability of completions accepted by `pred`, by enumeration.
pub fn enumerated_mass<M: SequenceModel>(
    model: &M,
    prompt: &[TokenId],
    cap: u128,
    pred: impl Fn(&[TokenId]) -> bool,
) -> Result<f64> {
    let total: f64 = policy::enumerate(model, prompt, cap)?.iter().filter(|(y, _)| pred(y)).map(|(_, l)| l.exp()).sum();
    Ok(total.min(1.0))
}

/// Fraction of `n` temperature-1 samples accepted by `pred`, with its binomial standard error.
pub fn monte_carlo_mass<M: SequenceModel>(
    model: &M,
    prompt: &[TokenId],
    n: usize,
    seed_value: u64,
    pred: impl Fn(&[TokenId]) -> bool,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(domain("Monte-Carlo budget must be at least 1"));
    }
    let hits = (0..n)
        .filter(|&i| {
            let y = policy::sample_with(model, prompt, usize::MAX, 1.0, 1.0, &mut seed::rng_at(seed_value, i as u64));
            pred(&y)
        })
        .count();
    let q = hits as f64 / n as f64;
    Ok((q, (q * (1.0 - q) / n as f64).sqrt()))
}

/// `Q(x)` for one instance under `mode`. Strict mode is an exact product;
/// outcome mode enumerates when the completion space fits under `cap` and
/// otherwise samples `budget` completions.
pub fn correct_mass_with_cap(
    policy: &Policy,
    inst: &Instance,
    mode: RewardMode,
    budget: usize,
    seed_value: u64,
    cap: u128,
) -> Result<CorrectMassReport> {
    let prompt = policy.tokenize(&inst.prompt_text)?;
    match mode {
        RewardMode::StrictChain => {
            let gold = policy.tokenize(&inst.target_text)?;
            Ok(CorrectMassReport {
                q_mass: singleton_mass(policy, &prompt, &gold)?,
                method: MassMethod::ExactSingleton,
                stderr: 0.0,
                n_samples: 0,
            })
        }
        RewardMode::OutcomeOnly => {
            let vocab = policy.vocab().clone();
            let accept = |y: &[TokenId]| verify(inst, &vocab.detokenize(y), mode) == 1;
            match enumerated_mass(policy, &prompt, cap, accept) {
                Ok(q) => Ok(CorrectMassReport { q_mass: q, method: MassMethod::ExactEnum, stderr: 0.0, n_samples: 0 }),
                Err(Error::Capacity { .. }) if budget > 0 => {
                    let (q, stderr) = monte_carlo_mass(policy, &prompt, budget, seed_value, accept)?;
                    Ok(CorrectMassReport { q_mass: q, method: MassMethod::MonteCarlo, stderr, n_samples: budget })
                }
                Err(e) => Err(e),
            }
        }
    }
}

pub fn correct_mass(
    policy: &Policy,
    inst: &Instance,
    mode: RewardMode,
    budget: usize,
    seed_value: u64,
) -> Result<CorrectMassReport> {
    correct_mass_with_cap(policy, inst, mode, budget, seed_value, ENUM_CAP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::fixtures::sigma_fix;
    use crate::taskgen::{Axis, OperatorSeq, Op, Split};

    fn depth2() -> Instance {
        Instance::build("TSKE3", OperatorSeq::repeat(Op::Trav, 2).unwrap(), &sigma_fix(), 5, Axis::DepthUp, Split::Id, 0)
            .unwrap()
    }

    #[test]
    fn verify_examples() {
        let inst = depth2();
        assert_eq!(verify(&inst, "=> 4EUOT <trav> => RO1K4", RewardMode::StrictChain), 1);
        assert_eq!(verify(&inst, "=> 4EUOT <trav> => RO1K4\n", RewardMode::StrictChain), 1);
        assert_eq!(verify(&inst, " => 4EUOT <trav> => RO1K4", RewardMode::StrictChain), 0);
        assert_eq!(verify(&inst, "=> 4EUOT <trav> => RO1K4", RewardMode::OutcomeOnly), 1);
        // outcome mode ignores the intermediate state but not the format
        assert_eq!(verify(&inst, "=> XXXXX <trav> => RO1K4", RewardMode::OutcomeOnly), 1);
        assert_eq!(verify(&inst, "junk => RO1K4", RewardMode::OutcomeOnly), 0);
        assert_eq!(verify(&inst, "", RewardMode::OutcomeOnly), 0);
    }

    #[test]
    fn pad_count_matters() {
        let inst =
            Instance::build("D29UO", OperatorSeq::repeat(Op::Trav, 1).unwrap(), &sigma_fix(), 8, Axis::LenDown, Split::Ood, 0)
                .unwrap();
        assert_eq!(inst.target_text, "=> IHS1K+++");
        assert_eq!(verify(&inst, "=> IHS1K++", RewardMode::OutcomeOnly), 0);
        assert_eq!(verify(&inst, "=> IHS1K++", RewardMode::StrictChain), 0);
        assert_eq!(verify(&inst, "=> IHS1K+++", RewardMode::OutcomeOnly), 1);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("strict".parse::<RewardMode>().unwrap(), RewardMode::StrictChain);
        assert_eq!("OUTCOME_ONLY".parse::<RewardMode>().unwrap(), RewardMode::OutcomeOnly);
        assert!("partial".parse::<RewardMode>().is_err());
    }
}
