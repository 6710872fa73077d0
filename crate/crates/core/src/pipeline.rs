//! Pretrain -> SFT -> GRPO experiments and OOD-ratio sweeps.
//!
//! A sweep point is one (ood ratio, seed) pair. Pretraining mixes ID and OOD
//! data at the ratio, SFT uses ID data only, and GRPO runs once per
//! configured `grpo_data` split starting from the same SFT policy. After each
//! stage the policy is scored on held-out ID and OOD test sets whose prompts
//! never occur in any training stage.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::{mpsc, Arc, Mutex};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};
use crate::grpo::{self, AdvantageMode, GrpoConfig, KlMode, TaskVerifier};
use crate::metrics::{self, DecodeConfig, EvalReport};
use crate::policy::{self, FeatureExtractor, Policy, Role, Template, TokenId, TrainBatch, Vocab};
use crate::reward::RewardMode;
use crate::seed;
use crate::taskgen::{gen_dataset, gen_dataset_excluding, Axis, DatasetSpec, Instance, MixedInputs, Split, TaskSuite};

/// Environment variable holding the number of concurrent sweep workers.
pub const WORKERS_ENV: &str = "TILTLAB_WORKERS";

/// Flat experiment description; every key is optional in the config file.
///
/// Training defaults are scaled for the log-linear policy. The transformer
/// settings they stand in for are 5e-4 (pretrain), 1e-5 (SFT) and 1e-6 (GRPO)
/// learning rates, batch 64, warmup 0.1, 8 samples per prompt, KL 0.005 and
/// 60 GRPO steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub axis: Axis,
    pub ratio_sweep: Vec<f64>,
    pub pretrain_count: usize,
    pub sft_count: usize,
    pub grpo_count: usize,
    /// Test instances per split.
    pub eval_count: usize,
    pub grpo_data: Vec<Split>,
    pub seeds: Vec<u64>,
    /// Token axis only: build OOD pretraining slots from mixed-alphabet inputs.
    pub mixed: Option<MixedInputs>,
    pub templates: Vec<Template>,

    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub sft_lr: f64,
    pub sft_epochs: usize,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub weight_decay: f64,

    pub grpo_lr: f64,
    pub grpo_steps: usize,
    pub group_size: usize,
    pub kl_coeff: f64,
    pub clip_eps: f64,
    pub advantage_mode: AdvantageMode,
    pub grpo_batch_size: usize,
    pub reward_mode: RewardMode,

    pub decode_temperature: f64,
    pub decode_nucleus: f64,
    pub max_len: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            axis: Axis::DepthUp,
            ratio_sweep: vec![0.0, 0.025, 0.05, 0.125, 0.25, 0.333],
            pretrain_count: 200_000,
            sft_count: 2000,
            grpo_count: 1000,
            eval_count: 1000,
            grpo_data: vec![Split::Id, Split::Ood],
            seeds: vec![1, 2, 3],
            mixed: None,
            templates: Template::ALL.to_vec(),
            pretrain_lr: 0.1,
            pretrain_epochs: 1,
            sft_lr: 0.05,
            sft_epochs: 1,
            batch_size: 64,
            warmup_frac: 0.1,
            weight_decay: 0.0,
            grpo_lr: 0.01,
            grpo_steps: 60,
            group_size: 8,
            kl_coeff: 0.005,
            clip_eps: 0.2,
            advantage_mode: AdvantageMode::GroupNorm,
            grpo_batch_size: 64,
            reward_mode: RewardMode::StrictChain,
            decode_temperature: 0.1,
            decode_nucleus: 0.8,
            max_len: policy::DEFAULT_HORIZON,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.pretrain_count == 0 || self.sft_count == 0 || self.grpo_count == 0 || self.eval_count == 0 {
            return bad("counts must be at least 1");
        }
        if self.ratio_sweep.is_empty() || self.ratio_sweep.iter().any(|r| !(0.0..=0.5).contains(r)) {
            return bad("ratio_sweep must be a non-empty list of ratios in [0, 0.5]");
        }
        if self.grpo_data.is_empty() || self.grpo_data.contains(&Split::Mixed) {
            return bad("grpo_data must list ID and/or OOD");
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        if self.templates.is_empty() {
            return bad("templates must be non-empty");
        }
        if self.batch_size == 0 || self.grpo_batch_size == 0 || self.max_len == 0 {
            return bad("batch sizes and max_len must be at least 1");
        }
        if !(self.pretrain_lr > 0.0 && self.sft_lr > 0.0) || self.weight_decay < 0.0 {
            return bad("learning rates must be positive and weight decay non-negative");
        }
        if self.mixed.is_some() && self.axis != Axis::Token {
            return bad("mixed applies to the token axis only");
        }
        self.grpo_config(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn grpo_config(&self, seed_value: u64) -> GrpoConfig {
        GrpoConfig {
            group_size: self.group_size,
            kl_coeff: self.kl_coeff,
            clip_eps: self.clip_eps,
            advantage_mode: self.advantage_mode,
            lr: self.grpo_lr,
            steps: self.grpo_steps,
            seed: seed_value,
            batch_size: self.grpo_batch_size,
            warmup_frac: self.warmup_frac,
            kl_mode: KlMode::Auto,
            inner_epochs: 1,
            rollout_temperature: 1.0,
        }
    }

    pub fn decode_config(&self, seed_value: u64) -> DecodeConfig {
        DecodeConfig {
            temperature: self.decode_temperature,
            nucleus_p: self.decode_nucleus,
            max_len: self.max_len,
            seed: seed::stream(seed_value, "decode"),
        }
    }
}

/// Settings for one maximum-likelihood stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

/// Minibatch MLE over `data` with per-epoch shuffling and linear warmup;
/// returns the mean NLL of every batch.
pub fn train_mle(policy: &mut Policy, data: &[(Vec<TokenId>, Vec<TokenId>)], role: Role, cfg: &MleConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(domain("training set is empty"));
    }
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warm = (cfg.warmup_frac * total as f64 - 1e-9).ceil().max(0.0) as usize;
    let end = policy.vocab().end();
    let mut losses = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng_at(cfg.seed, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch = TrainBatch::new(chunk.iter().map(|&i| data[i].clone()).collect(), role, end)?;
            let lr = if warm == 0 { cfg.lr } else { cfg.lr * ((step + 1) as f64 / warm as f64).min(1.0) };
            let nll = policy::mle_step_decayed(policy, &batch, lr, cfg.weight_decay)
                .map_err(|e| Error::AtStep { step, source: Box::new(e) })?;
            losses.push(nll);
            step += 1;
        }
    }
    Ok(losses)
}

/// Tokenized (prompt, target + end) pairs.
pub fn to_pairs(vocab: &Vocab, data: &[Instance]) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>> {
    data.iter()
        .map(|inst| {
            let mut target = vocab.tokenize(&inst.target_text)?;
            target.push(vocab.end());
            Ok((vocab.tokenize(&inst.prompt_text)?, target))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "BASE")]
    Base,
    #[serde(rename = "SFT")]
    Sft,
    #[serde(rename = "GRPO")]
    Grpo,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Base, Stage::Sft, Stage::Grpo];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "BASE",
            Stage::Sft => "SFT",
            Stage::Grpo => "GRPO",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: Axis,
    pub ood_ratio: f64,
    pub grpo_data: Split,
    pub seed: u64,
    pub stage: Stage,
    pub split_tag: Split,
    pub em: f64,
    pub bleu: f64,
}

/// Held-out test sets plus the training sets of one sweep point.
pub struct PointData {
    pub test_id: Vec<Instance>,
    pub test_ood: Vec<Instance>,
    pub pretrain: Vec<Instance>,
    pub sft: Vec<Instance>,
    pub grpo_id: Vec<Instance>,
    pub grpo_ood: Vec<Instance>,
}

impl PointData {
    pub fn generate(cfg: &ExperimentConfig, suite: Arc<TaskSuite>, ratio: f64, seed_value: u64) -> Result<Self> {
        let spec = |r: f64, count: usize, tag: &str| DatasetSpec::new(cfg.axis, r, count, seed::stream(seed_value, tag));
        let test_id = gen_dataset(&spec(0.0, cfg.eval_count, "test-id"), suite.clone())?.collect_all()?;
        let test_ood = gen_dataset(&spec(1.0, cfg.eval_count, "test-ood"), suite.clone())?.collect_all()?;
        let exclude: Arc<HashSet<String>> =
            Arc::new(test_id.iter().chain(&test_ood).map(|i| i.prompt_text.clone()).collect());
        let train = |s: DatasetSpec| gen_dataset_excluding(&s, suite.clone(), exclude.clone())?.collect_all();
        let mut pre = spec(ratio, cfg.pretrain_count, "pretrain");
        pre.mixed = cfg.mixed;
        Ok(Self {
            pretrain: train(pre)?,
            sft: train(spec(0.0, cfg.sft_count, "sft"))?,
            grpo_id: train(spec(0.0, cfg.grpo_count, "grpo-id"))?,
            grpo_ood: train(spec(1.0, cfg.grpo_count, "grpo-ood"))?,
            test_id,
            test_ood,
        })
    }
}

/// A sweep point that failed part-way, with the rows it did produce.
#[derive(Debug)]
pub struct PointError {
    pub partial: Vec<SweepRow>,
    pub source: Error,
}

impl std::fmt::Display for PointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "sweep point failed after {} rows: {}", self.partial.len(), self.source)
    }
}

impl std::error::Error for PointError {}

/// Policies produced along one point, for callers that want to inspect them.
pub struct PointPolicies {
    pub base: Policy,
    pub sft: Policy,
    pub grpo: Vec<(Split, Policy)>,
}

pub fn run_point(cfg: &ExperimentConfig, ratio: f64, seed_value: u64) -> std::result::Result<Vec<SweepRow>, PointError> {
    run_point_detailed(cfg, ratio, seed_value).map(|(rows, _)| rows)
}

pub fn run_point_detailed(
    cfg: &ExperimentConfig,
    ratio: f64,
    seed_value: u64,
) -> std::result::Result<(Vec<SweepRow>, PointPolicies), PointError> {
    let mut rows: Vec<SweepRow> = Vec::new();
    macro_rules! tri {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => return Err(PointError { partial: rows, source: e }),
            }
        };
    }
    tri!(cfg.validate());
    let suite = Arc::new(TaskSuite::default());
    let vocab = Arc::new(Vocab::for_suite(&suite));
    let data = tri!(PointData::generate(cfg, suite, ratio, seed_value));
    let extractor = tri!(FeatureExtractor::new(cfg.templates.clone()));
    let mut pol = tri!(Policy::new(vocab.clone(), extractor).with_horizon(cfg.max_len));
    pol.temperature = cfg.decode_temperature;
    let decode = cfg.decode_config(seed_value);
    let eval = |p: &Policy| -> Result<(EvalReport, EvalReport)> {
        Ok((metrics::evaluate(p, &data.test_id, &decode)?, metrics::evaluate(p, &data.test_ood, &decode)?))
    };
    let mle = |lr, epochs, tag| MleConfig {
        lr,
        batch_size: cfg.batch_size,
        epochs,
        warmup_frac: cfg.warmup_frac,
        weight_decay: cfg.weight_decay,
        seed: seed::stream(seed_value, tag),
    };
    let stage_rows = |stage: Stage, reports: &(EvalReport, EvalReport)| -> Vec<SweepRow> {
        let mut out = Vec::new();
        for &g in &cfg.grpo_data {
            for (split, r) in [(Split::Id, &reports.0), (Split::Ood, &reports.1)] {
                out.push(SweepRow {
                    axis: cfg.axis,
                    ood_ratio: ratio,
                    grpo_data: g,
                    seed: seed_value,
                    stage,
                    split_tag: split,
                    em: r.exact_match,
                    bleu: r.bleu,
                });
            }
        }
        out
    };

    let pre_pairs = tri!(to_pairs(&vocab, &data.pretrain));
    tri!(train_mle(&mut pol, &pre_pairs, Role::Pretrain, &mle(cfg.pretrain_lr, cfg.pretrain_epochs, "pretrain-order")));
    pol.stage = "BASE".into();
    let base = pol.clone();
    rows.extend(stage_rows(Stage::Base, &tri!(eval(&pol))));

    let sft_pairs = tri!(to_pairs(&vocab, &data.sft));
    tri!(train_mle(&mut pol, &sft_pairs, Role::Sft, &mle(cfg.sft_lr, cfg.sft_epochs, "sft-order")));
    pol.stage = "SFT".into();
    let sft = pol.clone();
    rows.extend(stage_rows(Stage::Sft, &tri!(eval(&sft))));

    let mut grpo_rows = Vec::new();
    let mut grpo_policies = Vec::new();
    for &g in &cfg.grpo_data {
        let instances = if g == Split::Id { data.grpo_id.clone() } else { data.grpo_ood.clone() };
        let verifier = TaskVerifier::new(vocab.clone(), instances, cfg.reward_mode);
        let prompts = tri!(verifier.prompts());
        let gcfg = cfg.grpo_config(seed::stream(seed_value, g.name()));
        let (mut trained, _) = tri!(grpo::train(&sft, &sft, &prompts, &verifier, &gcfg));
        trained.stage = "GRPO".into();
        let (id, ood) = tri!(eval(&trained));
        for (split, r) in [(Split::Id, id), (Split::Ood, ood)] {
            grpo_rows.push(SweepRow {
                axis: cfg.axis,
                ood_ratio: ratio,
                grpo_data: g,
                seed: seed_value,
                stage: Stage::Grpo,
                split_tag: split,
                em: r.exact_match,
                bleu: r.bleu,
            });
        }
        grpo_policies.push((g, trained));
    }
    rows.extend(grpo_rows);
    rows.sort_by(|a, b| row_order(cfg, a, b));
    Ok((rows, PointPolicies { base, sft, grpo: grpo_policies }))
}

fn position<T: PartialEq>(list: &[T], x: &T) -> usize {
    list.iter().position(|y| y == x).unwrap_or(usize::MAX)
}

/// Canonical order: config ratio order, seed order, grpo_data order, stage, split.
fn row_order(cfg: &ExperimentConfig, a: &SweepRow, b: &SweepRow) -> std::cmp::Ordering {
    let key = |r: &SweepRow| {
        (
            position(&cfg.ratio_sweep, &r.ood_ratio),
            position(&cfg.seeds, &r.seed),
            position(&cfg.grpo_data, &r.grpo_data),
            r.stage,
            r.split_tag,
        )
    };
    key(a).cmp(&key(b))
}

const CHECKSUM_PREFIX: &str = "#sha256=";

fn rows_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["axis", "ood_ratio", "grpo_data", "seed", "stage", "split_tag", "em", "bleu"])?;
    for r in rows {
        w.serialize(r)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv output is UTF-8");
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    Ok(format!("{body}{CHECKSUM_PREFIX}{digest}\n"))
}

/// Parses a sweep CSV, verifying the terminal checksum row.
pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let body_end = text.rfind(CHECKSUM_PREFIX).ok_or_else(|| Error::Format("sweep CSV has no checksum row".into()))?;
    let (body, tail) = text.split_at(body_end);
    let expected = tail[CHECKSUM_PREFIX.len()..].trim();
    if hex::encode(Sha256::digest(body.as_bytes())) != expected {
        return Err(Error::Format("sweep CSV checksum mismatch (file is truncated or corrupted)".into()));
    }
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let headers = r.headers()?.clone();
    let want = ["axis", "ood_ratio", "grpo_data", "seed", "stage", "split_tag", "em", "bleu"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Format(format!("unexpected sweep CSV header {headers:?}")));
    }
    r.deserialize().map(|row| row.map_err(|e| Error::Format(e.to_string()))).collect()
}

/// Writes `contents` to `path` through a temporary file and a rename.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn worker_count() -> usize {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).filter(|n| *n >= 1).unwrap_or(1)
}

/// Runs every (ratio, seed) point not already complete in `out`, rewriting
/// the CSV after each finished point. Returns all rows in canonical order.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut rows = if out.exists() { read_sweep_csv(&std::fs::read_to_string(out)?)? } else { Vec::new() };
    let complete = |rows: &[SweepRow], ratio: f64, s: u64| {
        let have = rows.iter().filter(|r| r.axis == cfg.axis && r.ood_ratio == ratio && r.seed == s).count();
        have == cfg.grpo_data.len() * Stage::ALL.len() * 2
    };
    let jobs: Vec<(f64, u64)> = cfg
        .ratio_sweep
        .iter()
        .flat_map(|&r| cfg.seeds.iter().map(move |&s| (r, s)))
        .filter(|&(r, s)| !complete(&rows, r, s))
        .collect();
    if jobs.is_empty() {
        return Ok(rows);
    }

    let queue = Arc::new(Mutex::new(jobs.into_iter()));
    let (tx, rx) = mpsc::channel();
    let workers = worker_count();
    let mut first_error = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let queue = queue.clone();
            let tx = tx.clone();
            scope.spawn(move || loop {
                let job = queue.lock().expect("queue lock").next();
                let Some((ratio, s)) = job else { break };
                if tx.send(run_point(cfg, ratio, s)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for result in rx {
            match result {
                Ok(point_rows) => {
                    rows.extend(point_rows);
                    rows.sort_by(|a, b| row_order(cfg, a, b));
                    if let Err(e) = rows_to_csv(&rows).and_then(|text| write_atomic(out, &text)) {
                        first_error.get_or_insert(e);
                    }
                }
                Err(e) => {
                    first_error.get_or_insert(Error::Training(e.to_string()));
                }
            }
        }
    });
    match first_error {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Seed medians for one (axis, grpo_data, ratio, split) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub axis: Axis,
    pub grpo_data: Split,
    pub ood_ratio: f64,
    pub split_tag: Split,
    pub n_seeds: usize,
    pub base_em: Option<f64>,
    pub sft_em: Option<f64>,
    pub grpo_em: Option<f64>,
    pub base_bleu: Option<f64>,
    pub sft_bleu: Option<f64>,
    pub grpo_bleu: Option<f64>,
    /// Median over seeds of GRPO em minus SFT em.
    pub gain_em: Option<f64>,
    pub gain_bleu: Option<f64>,
}

pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    type Key = (Axis, Split, u64, Split);
    let mut cells: BTreeMap<Key, BTreeMap<u64, BTreeMap<Stage, (f64, f64)>>> = BTreeMap::new();
    for r in rows {
        cells
            .entry((r.axis, r.grpo_data, r.ood_ratio.to_bits(), r.split_tag))
            .or_default()
            .entry(r.seed)
            .or_default()
            .insert(r.stage, (r.em, r.bleu));
    }
    let mut out: Vec<SummaryRow> = cells
        .into_iter()
        .map(|((axis, grpo_data, ratio, split_tag), seeds)| {
            let col = |stage: Stage, f: fn(&(f64, f64)) -> f64| {
                median(&seeds.values().filter_map(|m| m.get(&stage).map(f)).collect::<Vec<_>>())
            };
            let gain = |f: fn(&(f64, f64)) -> f64| {
                median(
                    &seeds
                        .values()
                        .filter_map(|m| Some(f(m.get(&Stage::Grpo)?) - f(m.get(&Stage::Sft)?)))
                        .collect::<Vec<_>>(),
                )
            };
            SummaryRow {
                axis,
                grpo_data,
                ood_ratio: f64::from_bits(ratio),
                split_tag,
                n_seeds: seeds.len(),
                base_em: col(Stage::Base, |x| x.0),
                sft_em: col(Stage::Sft, |x| x.0),
                grpo_em: col(Stage::Grpo, |x| x.0),
                base_bleu: col(Stage::Base, |x| x.1),
                sft_bleu: col(Stage::Sft, |x| x.1),
                grpo_bleu: col(Stage::Grpo, |x| x.1),
                gain_em: gain(|x| x.0),
                gain_bleu: gain(|x| x.1),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.axis, a.grpo_data, a.split_tag)
            .cmp(&(b.axis, b.grpo_data, b.split_tag))
            .then(a.ood_ratio.total_cmp(&b.ood_ratio))
    });
    out
}

pub fn summary_csv(summary: &[SummaryRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record([
        "axis", "grpo_data", "ood_ratio", "split_tag", "n_seeds", "base_em", "sft_em", "grpo_em", "base_bleu", "sft_bleu",
        "grpo_bleu", "gain_em", "gain_bleu",
    ])?;
    for s in summary {
        w.serialize(s)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv output is UTF-8"))
}

/// Plain-text tables, one block per (axis, grpo_data, split).
pub fn summary_text(summary: &[SummaryRow]) -> String {
    let cell = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
    let gain = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:+.3}"));
    let mut out = String::new();
    let mut current = None;
    for s in summary {
        let block = (s.axis, s.grpo_data, s.split_tag);
        if current != Some(block) {
            current = Some(block);
            let _ = writeln!(out, "\n{} | grpo_data {} | eval {}", s.axis, s.grpo_data, s.split_tag);
            let _ = writeln!(
                out,
                "{:>8} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
                "ratio", "seeds", "base_em", "sft_em", "grpo_em", "gain_em", "base_bl", "sft_bl", "grpo_bl", "gain_bl"
            );
        }
        let _ = writeln!(
            out,
            "{:>8.3} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            s.ood_ratio,
            s.n_seeds,
            cell(s.base_em),
            cell(s.sft_em),
            cell(s.grpo_em),
            gain(s.gain_em),
            cell(s.base_bleu),
            cell(s.sft_bleu),
            cell(s.grpo_bleu),
            gain(s.gain_bleu)
        );
    }
    out
}

/// Report over a sweep CSV: (plain text, summary CSV, warnings).
pub fn report(csv_text: &str) -> Result<(String, String, Vec<String>)> {
    let rows = read_sweep_csv(csv_text)?;
    let mut warnings = Vec::new();
    if rows.is_empty() {
        warnings.push("sweep CSV has no rows".to_string());
    }
    let summary = summarize(&rows);
    Ok((summary_text(&summary), summary_csv(&summary)?, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, stage: Stage, em: f64) -> SweepRow {
        SweepRow {
            axis: Axis::DepthUp,
            ood_ratio: 0.125,
            grpo_data: Split::Ood,
            seed,
            stage,
            split_tag: Split::Ood,
            em,
            bleu: em,
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[0.10, 0.30, 0.20]), Some(0.20));
        assert_eq!(median(&[1.0, 3.0]), Some(2.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn csv_round_trip_and_checksum() {
        let rows = vec![row(1, Stage::Base, 0.5), row(1, Stage::Sft, 0.25)];
        let text = rows_to_csv(&rows).unwrap();
        assert!(text.starts_with("axis,ood_ratio,grpo_data,seed,stage,split_tag,em,bleu\n"));
        assert!(text.contains("depth_up,0.125,OOD,1,BASE,OOD,0.5,0.5\n"));
        assert_eq!(read_sweep_csv(&text).unwrap(), rows);
        let truncated = &text[..text.len() - 30];
        assert!(read_sweep_csv(truncated).is_err());
        let tampered = text.replace("0.25", "0.35");
        assert!(matches!(read_sweep_csv(&tampered), Err(Error::Format(_))));
    }

    #[test]
    fn summary_gain_is_median_of_differences() {
        let mut rows = Vec::new();
        for (s, sft, grpo) in [(1, 0.1, 0.3), (2, 0.2, 0.2), (3, 0.3, 0.4)] {
            rows.push(row(s, Stage::Sft, sft));
            rows.push(row(s, Stage::Grpo, grpo));
        }
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 1);
        assert_eq!(summary[0].sft_em, Some(0.2));
        assert!((summary[0].gain_em.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(summary[0].base_em, None);
    }

    #[test]
    fn empty_report_warns() {
        let (text, csv_out, warnings) = report("").unwrap();
        assert!(text.is_empty());
        assert_eq!(csv_out.lines().count(), 1);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn config_defaults_and_parsing() {
        let cfg = ExperimentConfig::from_toml("axis = \"token\"\nratio_sweep = [0.0, 0.25]\ngrpo_data = [\"ID\"]\n").unwrap();
        assert_eq!(cfg.axis, Axis::Token);
        assert_eq!(cfg.sft_count, 2000);
        assert_eq!(cfg.grpo_data, vec![Split::Id]);
        assert!(ExperimentConfig::from_toml("unknown_key = 3").is_err());
        assert!(ExperimentConfig::from_toml("ratio_sweep = [0.7]").is_err());
        assert!(ExperimentConfig::from_toml("grpo_data = [\"MIXED\"]").is_err());
        let back = ExperimentConfig::from_toml(&ExperimentConfig::default().to_toml()).unwrap();
        assert_eq!(back, ExperimentConfig::default());
    }
}
