use super::*;
use crate::seed;
use crate::taskgen::TaskSuite;
use rand::Rng;

/// Begin, end, `a`, `b`: three candidate tokens once the begin marker is excluded.
fn tiny_vocab() -> Arc<Vocab> {
    Arc::new(Vocab::new(vec![BEGIN.into(), END.into(), "a".into(), "b".into()], None).unwrap())
}

fn tiny_policy(horizon: usize, seed_value: u64) -> Policy {
    let mut p = Policy::new(tiny_vocab(), FeatureExtractor::default()).with_horizon(horizon).unwrap();
    randomize(&mut p, seed_value, &[2, 3]);
    p
}

/// Random weights on the contexts reachable from `prompt` with up to `horizon` tokens.
fn randomize(p: &mut Policy, seed_value: u64, prompt: &[TokenId]) {
    let mut rng = seed::rng(seed_value);
    let all = enumerate(p, prompt, 10_000).unwrap();
    let n = p.vocab().len();
    let mut ctxs = Vec::new();
    for (y, _) in all {
        let mut c = p.start(prompt);
        for t in y.iter().copied().chain(std::iter::once(p.vocab().end())) {
            p.extractor().contexts(&c, &mut ctxs);
            for ctx in ctxs.clone() {
                for v in 0..n as TokenId {
                    if p.weight(&ctx, v) == 0.0 {
                        p.set_weight(ctx, v, rng.gen_range(-1.5..1.5));
                    }
                }
            }
            p.advance(&mut c, t);
        }
    }
}

#[test]
fn zero_policy_logprob_is_uniform() {
    let p = Policy::new(tiny_vocab(), FeatureExtractor::default());
    let lp = logprob(&p, &[], &[2, 3, 2]).unwrap();
    assert!((lp + 4.0 * 3f64.ln()).abs() < 1e-12);
    let empty = logprob(&p, &[], &[]).unwrap();
    assert!((empty + 3f64.ln()).abs() < 1e-12);
    assert!(logprob(&p, &[], &[9]).is_err());
}

#[test]
fn completions_sum_to_one() {
    for s in 0..5 {
        let p = tiny_policy(2, s);
        let all = enumerate(&p, &[2, 3], ENUM_CAP).unwrap();
        assert_eq!(all.len(), 7);
        let total: f64 = all.iter().map(|(_, l)| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
        for (y, l) in &all {
            assert!((logprob(&p, &[2, 3], y).unwrap() - l).abs() < 1e-12);
        }
    }
}

#[test]
fn next_token_distribution_normalized() {
    let p = tiny_policy(3, 4);
    let mut c = p.start(&[2]);
    for t in [2, 3, 3] {
        let total: f64 = p.next_log_probs(&c).iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        p.advance(&mut c, t);
    }
    let forced = p.next_log_probs(&c);
    assert_eq!(forced[1], 0.0);
}

#[test]
fn space_size_counts_completions() {
    let p = tiny_policy(2, 0);
    assert_eq!(p.space_size(), 7);
    let masked = p.clone().with_allowed(&[2, 3]).unwrap();
    assert_eq!(masked.space_size(), 4);
    assert_eq!(enumerate(&masked, &[], ENUM_CAP).unwrap().len(), 4);
    let big = Policy::new(tiny_vocab(), FeatureExtractor::default()).with_horizon(200).unwrap();
    assert!(matches!(enumerate(&big, &[], ENUM_CAP), Err(Error::Capacity { .. })));
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let p = tiny_policy(6, 2);
    let a = sample(&p, &[2], 6, 1.0, 1.0, 11);
    let b = sample(&p, &[2], 6, 1.0, 1.0, 11);
    assert_eq!(a, b);
    let differ = (0..20).any(|s| sample(&p, &[2], 6, 1.0, 1.0, s) != a);
    assert!(differ);
}

#[test]
fn sampling_matches_softmax() {
    let p = tiny_policy(1, 9);
    let lp = p.next_log_probs(&p.start(&[3]));
    let n = 100_000;
    let mut counts = [0usize; 4];
    for i in 0..n {
        let y = sample(&p, &[3], 1, 1.0, 1.0, seed::derive(5, i as u64));
        counts[y.first().copied().unwrap_or(1) as usize] += 1;
    }
    for v in 1..4 {
        let prob = lp[v].exp();
        let sd = (n as f64 * prob * (1.0 - prob)).sqrt();
        assert!((counts[v] as f64 - n as f64 * prob).abs() <= 4.0 * sd, "token {v}: {} vs {}", counts[v], prob);
    }
}

#[test]
fn entropy_grows_with_temperature() {
    let p = tiny_policy(2, 1);
    let lp = p.next_log_probs(&p.start(&[2]));
    let entropy = |t: f64| {
        let mut s: Vec<f64> = lp.iter().map(|l| l / t).collect();
        log_softmax(&mut s);
        -s.iter().filter(|l| l.is_finite()).map(|l| l.exp() * l).sum::<f64>()
    };
    let mut prev = 0.0;
    for t in [0.05, 0.1, 0.3, 1.0, 2.0, 10.0] {
        let h = entropy(t);
        assert!(h >= prev - 1e-12);
        prev = h;
    }
}

fn fd_check(p: &Policy, objective: impl Fn(&Policy) -> f64, grad: &SparseGrad, n_checks: usize, seed_value: u64) {
    let mut rng = seed::rng(seed_value);
    let keys: Vec<(Context, TokenId)> = {
        let mut k: Vec<(Context, TokenId)> = grad
            .rows()
            .iter()
            .flat_map(|(c, row)| row.iter().enumerate().filter(|(_, g)| **g != 0.0).map(move |(v, _)| (*c, v as TokenId)))
            .collect();
        k.sort();
        k
    };
    assert!(!keys.is_empty());
    let h = 1e-5;
    for _ in 0..n_checks {
        let (ctx, v) = keys[rng.gen_range(0..keys.len())];
        let w = p.weight(&ctx, v);
        let mut plus = p.clone();
        plus.set_weight(ctx, v, w + h);
        let mut minus = p.clone();
        minus.set_weight(ctx, v, w - h);
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let an = grad.get(&ctx, v);
        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{ctx:?}/{v}: fd {fd} vs analytic {an}");
    }
}

#[test]
fn likelihood_gradient_matches_finite_differences() {
    let p = tiny_policy(4, 3);
    let end = p.vocab().end();
    let batch =
        TrainBatch::new(vec![(vec![2], vec![3, 2, end]), (vec![3, 2], vec![2, 2, 3, end])], Role::Pretrain, end).unwrap();
    let (_, grad) = p.likelihood_gradient(&batch).unwrap();
    fd_check(&p, |q| -q.mean_nll(&batch).unwrap(), &grad, 10, 8);
}

#[test]
fn token_kl_gradient_matches_finite_differences() {
    let p = tiny_policy(3, 5);
    let r = tiny_policy(3, 6);
    let mut c = p.start(&[2]);
    p.advance(&mut c, 3);
    let mut rc = r.start(&[2]);
    r.advance(&mut rc, 3);
    let ref_lp = r.next_log_probs(&rc);
    let mut grad = SparseGrad::new();
    p.accumulate_token_kl_grad(&c, &ref_lp, 1.0, &mut grad);
    let obj = |q: &Policy| token_kl(&q.next_log_probs(&c), &ref_lp);
    fd_check(&p, obj, &grad, 10, 9);
}

#[test]
fn mle_zero_lr_is_noop() {
    let mut p = tiny_policy(3, 1);
    let before = p.clone();
    let end = p.vocab().end();
    let batch = TrainBatch::new(vec![(vec![2], vec![3, end])], Role::Sft, end).unwrap();
    let nll = mle_step(&mut p, &batch, 0.0).unwrap();
    assert_eq!(p.to_checkpoint(), before.to_checkpoint());
    assert!((nll - before.mean_nll(&batch).unwrap()).abs() < 1e-15);
}

#[test]
fn batch_validation() {
    let end = 1;
    assert!(TrainBatch::new(vec![], Role::Sft, end).is_err());
    assert!(TrainBatch::new(vec![(vec![2], vec![3])], Role::Sft, end).is_err());
}

#[test]
fn memorizes_one_instance() {
    let suite = TaskSuite::default();
    let vocab = Arc::new(Vocab::for_suite(&suite));
    let mut p = Policy::new(vocab.clone(), FeatureExtractor::default());
    let prompt = vocab.tokenize("TSKE3 <trav><trav>").unwrap();
    let mut target = vocab.tokenize("=> 4EUOT <trav> => RO1K4").unwrap();
    target.push(vocab.end());
    let batch = TrainBatch::new(vec![(prompt.clone(), target.clone())], Role::Sft, vocab.end()).unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..300 {
        last = mle_step(&mut p, &batch, 0.5).unwrap();
    }
    assert!(last < 0.05, "{last}");
    let lp = p.tokens_logprob(&prompt, &target).unwrap();
    assert!(lp < 0.0 && lp > -0.05);
    let greedy = sample(&p, &prompt, 256, 1e-6, 1.0, 1);
    assert_eq!(vocab.detokenize(&greedy), "=> 4EUOT <trav> => RO1K4");
}

#[test]
fn kl_self_is_zero() {
    let p = tiny_policy(2, 3);
    assert_eq!(kl_to_ref(&p, &p, &[2], KlMethod::Exact, 0, 0).unwrap(), 0.0);
    assert_eq!(kl_to_ref(&p, &p.clone(), &[2], KlMethod::MonteCarlo, 100, 4).unwrap(), 0.0);
    let zero_a = Policy::new(tiny_vocab(), FeatureExtractor::default()).with_horizon(2).unwrap();
    let zero_b = Policy::new(tiny_vocab(), FeatureExtractor::default()).with_horizon(2).unwrap();
    assert_eq!(kl_to_ref(&zero_a, &zero_b, &[], KlMethod::Exact, 0, 0).unwrap(), 0.0);
}

#[test]
fn kl_exact_agrees_with_monte_carlo() {
    let p = tiny_policy(2, 12);
    let q = tiny_policy(2, 13);
    let exact = kl_exact(&p, &q, &[2, 3], ENUM_CAP).unwrap();
    assert!(exact > 0.0);
    let mc = kl_monte_carlo(&p, &q, &[2, 3], 20_000, 77).unwrap();
    assert!((mc.value - exact).abs() <= 4.0 * mc.stderr, "{} +- {} vs {exact}", mc.value, mc.stderr);
}

#[test]
fn checkpoint_round_trip() {
    let mut p = tiny_policy(3, 21).with_allowed(&[1, 2]).unwrap();
    p.stage = "SFT".into();
    p.temperature = 0.25;
    let text = p.to_checkpoint();
    let q = Policy::from_checkpoint(&text).unwrap();
    assert_eq!(q.to_checkpoint(), text);
    assert_eq!(q.stage, "SFT");
    assert!(!q.is_allowed(3));
    for (y, l) in enumerate(&p, &[2], ENUM_CAP).unwrap() {
        assert_eq!(logprob(&q, &[2], &y).unwrap(), l);
    }
    let tampered = text.replacen("\"a\"", "\"c\"", 1);
    assert!(Policy::from_checkpoint(&tampered).is_err());
}
