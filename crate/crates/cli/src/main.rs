//! Command-line front end for dataset generation, training, evaluation and sweeps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tiltlab::grpo::{self, AdvantageMode, GrpoConfig, KlMode, TaskVerifier};
use tiltlab::metrics::{self, DecodeConfig};
use tiltlab::pipeline::{self, ExperimentConfig, MleConfig};
use tiltlab::policy::{FeatureExtractor, Policy, Role, Template, Vocab};
use tiltlab::reward::{self, RewardMode};
use tiltlab::taskgen::{gen_dataset, read_jsonl, write_jsonl, Axis, DatasetSpec, Instance, TaskSuite};
use tiltlab::tilt::{self, TiltParams};

#[derive(Parser)]
#[command(name = "tiltlab", version, about = "Synthetic OOD tasks, tilting bounds and GRPO on log-linear policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a JSONL dataset.
    Gen {
        #[arg(long)]
        axis: Axis,
        #[arg(long, default_value_t = 0.0)]
        ood_ratio: f64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score responses against a dataset.
    Score {
        #[arg(long)]
        data: PathBuf,
        /// JSONL with a "response" string per line, or plain text with one response per line.
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, default_value = "strict")]
        mode: RewardMode,
    },
    /// Tilt bounds at one point, or a curve with `tilt sweep`.
    Tilt {
        #[command(subcommand)]
        action: Option<TiltAction>,
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Maximum-likelihood pretraining or SFT.
    TrainMle {
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint; a fresh zero policy when absent.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, value_parser = parse_role, default_value = "pretrain")]
        role: Role,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        warmup: f64,
        #[arg(long, default_value_t = 0.0)]
        weight_decay: f64,
        /// Comma-separated feature templates for a fresh policy.
        #[arg(long, value_delimiter = ',', value_parser = parse_template)]
        templates: Option<Vec<Template>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// GRPO fine-tuning against a frozen reference.
    TrainGrpo {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        group: usize,
        #[arg(long, default_value_t = 0.005)]
        kl: f64,
        #[arg(long, default_value_t = 60)]
        steps: usize,
        #[arg(long, default_value = "group_norm")]
        mode: AdvantageMode,
        #[arg(long, default_value_t = 0.2)]
        clip: f64,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value = "strict")]
        reward: RewardMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Decode a dataset and report exact match and BLEU.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        temperature: f64,
        #[arg(long, default_value_t = 0.8)]
        nucleus: f64,
        #[arg(long, default_value_t = 256)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_instance: Option<PathBuf>,
    },
    /// Run every (ratio, seed) point of an experiment config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a sweep CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Also write the summary table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TiltAction {
    /// Emit Q, f, gain, bound and threshold over a uniform grid on (0, 1).
    Sweep {
        #[arg(long)]
        beta: f64,
        #[arg(long, default_value_t = 1000)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_role(s: &str) -> std::result::Result<Role, String> {
    match s.to_ascii_lowercase().as_str() {
        "pretrain" => Ok(Role::Pretrain),
        "sft" => Ok(Role::Sft),
        _ => Err(format!("unknown role {s} (expected pretrain or sft)")),
    }
}

fn parse_template(s: &str) -> std::result::Result<Template, String> {
    Template::from_name(s).ok_or_else(|| format!("unknown template {s}"))
}

fn read_data(path: &Path) -> Result<Vec<Instance>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_policy(path: &Path) -> Result<Policy> {
    Policy::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

#[derive(Deserialize)]
struct ResponseLine {
    response: String,
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    prompt: &'a str,
    reward: u8,
}

fn read_responses(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let parsed = line.trim_start().starts_with('{').then(|| serde_json::from_str::<ResponseLine>(&line).ok()).flatten();
        out.push(parsed.map_or(line, |r| r.response));
    }
    Ok(out)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { axis, ood_ratio, count, seed, out } => {
            let spec = DatasetSpec::new(axis, ood_ratio, count, seed);
            let data = gen_dataset(&spec, Arc::new(TaskSuite::default()))?.collect_all()?;
            write_jsonl(&data, create(&out)?)?;
            eprintln!("wrote {} instances ({} OOD) to {}", data.len(), spec.ood_count(), out.display());
        }
        Command::Score { data, responses, mode } => {
            let data = read_data(&data)?;
            let responses = read_responses(&responses)?;
            if responses.len() != data.len() {
                bail!("{} responses for {} instances", responses.len(), data.len());
            }
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            let mut total = 0usize;
            for (inst, resp) in data.iter().zip(&responses) {
                let r = reward::verify(inst, resp, mode);
                total += usize::from(r);
                serde_json::to_writer(&mut w, &ScoreLine { prompt: &inst.prompt_text, reward: r })?;
                writeln!(w)?;
            }
            let mean = if data.is_empty() { 0.0 } else { total as f64 / data.len() as f64 };
            writeln!(w, "{}", serde_json::json!({ "n": data.len(), "correct": total, "mean_reward": mean }))?;
        }
        Command::Tilt { action: Some(TiltAction::Sweep { beta, grid, out }), .. } => {
            let rows = tilt::sweep(TiltParams::from_beta(beta)?, grid)?;
            let mut w = csv::Writer::from_writer(create(&out)?);
            w.write_record(["Q", "f", "gain", "bound", "threshold"])?;
            for r in rows {
                w.serialize((r.q_mass, r.tilted_mass, r.gain, r.linear_bound, r.threshold))?;
            }
            w.flush()?;
        }
        Command::Tilt { action: None, q, beta } => {
            let (Some(q), Some(beta)) = (q, beta) else { bail!("tilt needs --q and --beta (or the sweep subcommand)") };
            let report = tilt::bound_report(q, TiltParams::from_beta(beta)?)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::TrainMle { data, policy, role, lr, batch, epochs, warmup, weight_decay, templates, seed, out } => {
            let data = read_data(&data)?;
            let mut pol = match policy {
                Some(path) => {
                    if templates.is_some() {
                        bail!("--templates only applies to a fresh policy");
                    }
                    load_policy(&path)?
                }
                None => {
                    let extractor = match templates {
                        Some(t) => FeatureExtractor::new(t)?,
                        None => FeatureExtractor::default(),
                    };
                    Policy::new(Arc::new(Vocab::for_suite(&TaskSuite::default())), extractor)
                }
            };
            let pairs = pipeline::to_pairs(pol.vocab(), &data)?;
            let cfg = MleConfig { lr, batch_size: batch, epochs, warmup_frac: warmup, weight_decay, seed };
            let losses = pipeline::train_mle(&mut pol, &pairs, role, &cfg)?;
            pol.stage = match role {
                Role::Pretrain => "BASE".into(),
                Role::Sft => "SFT".into(),
            };
            pol.save(&out)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                eprintln!("{} steps, nll {first:.4} -> {last:.4}", losses.len());
            }
        }
        Command::TrainGrpo {
            policy,
            reference,
            data,
            group,
            kl,
            steps,
            mode,
            clip,
            lr,
            batch,
            reward,
            seed,
            out,
            stats,
        } => {
            let pol = load_policy(&policy)?;
            let reference = load_policy(&reference)?;
            let data = read_data(&data)?;
            let cfg = GrpoConfig {
                group_size: group,
                kl_coeff: kl,
                clip_eps: clip,
                advantage_mode: mode,
                lr,
                steps,
                seed,
                batch_size: batch,
                kl_mode: KlMode::Auto,
                ..GrpoConfig::default()
            };
            let verifier = TaskVerifier::new(pol.vocab().clone(), data, reward);
            let prompts = verifier.prompts()?;
            let (mut trained, history) = grpo::train(&pol, &reference, &prompts, &verifier, &cfg)?;
            trained.stage = "GRPO".into();
            trained.save(&out)?;
            if let Some(path) = stats {
                grpo::write_stats(&history, create(&path)?)?;
            }
            if let Some(last) = history.last() {
                eprintln!("step {}: reward {:.3}, kl {:.4}, clip {:.3}", last.step, last.mean_reward, last.mean_kl, last.clip_frac);
            }
        }
        Command::Eval { policy, data, temperature, nucleus, max_len, seed, out, per_instance } => {
            let pol = load_policy(&policy)?;
            let data = read_data(&data)?;
            if data.is_empty() {
                bail!("evaluation dataset is empty");
            }
            let cfg = DecodeConfig { temperature, nucleus_p: nucleus, max_len, seed };
            let results = metrics::evaluate_detailed(&pol, &data, &cfg)?;
            let report = metrics::EvalReport::from_results(&results);
            let mut w = create(&out)?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            writeln!(w)?;
            if let Some(path) = per_instance {
                let mut w = create(&path)?;
                for r in &results {
                    serde_json::to_writer(&mut w, r)?;
                    writeln!(w)?;
                }
            }
            eprintln!("em {:.4}, bleu {:.4} over {}", report.exact_match, report.bleu, report.n);
        }
        Command::Sweep { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rows = pipeline::run_sweep(&cfg, &out)?;
            eprintln!("{} rows in {}", rows.len(), out.display());
        }
        Command::Report { input, csv } => {
            let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let (table, summary_csv, warnings) = pipeline::report(&text)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            print!("{table}");
            if let Some(path) = csv {
                std::fs::write(&path, summary_csv)?;
            }
        }
    }
    Ok(())
}
