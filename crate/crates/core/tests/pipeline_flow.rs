use std::collections::HashSet;
use std::sync::Arc;

use tiltlab::pipeline::{self, ExperimentConfig, PointData, Stage};
use tiltlab::taskgen::{Axis, Split, TaskSuite};

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        axis: Axis::DepthUp,
        ratio_sweep: vec![0.0, 0.25],
        seeds: vec![1, 2],
        pretrain_count: 300,
        sft_count: 50,
        grpo_count: 30,
        eval_count: 20,
        grpo_steps: 2,
        grpo_batch_size: 8,
        group_size: 4,
        batch_size: 16,
        ..ExperimentConfig::default()
    }
}

#[test]
fn default_grid_has_216_rows_per_axis() {
    let cfg = ExperimentConfig::default();
    let per_point = cfg.grpo_data.len() * Stage::ALL.len() * 2;
    assert_eq!(cfg.ratio_sweep.len() * cfg.seeds.len() * per_point, 216);
}

#[test]
fn training_sets_never_contain_test_prompts() {
    let cfg = ExperimentConfig { pretrain_count: 2000, eval_count: 300, ..tiny() };
    let data = PointData::generate(&cfg, Arc::new(TaskSuite::default()), 0.25, 4).unwrap();
    let test: HashSet<&str> = data.test_id.iter().chain(&data.test_ood).map(|i| i.prompt_text.as_str()).collect();
    for set in [&data.pretrain, &data.sft, &data.grpo_id, &data.grpo_ood] {
        assert!(set.iter().all(|i| !test.contains(i.prompt_text.as_str())));
    }
    assert!(data.test_id.iter().all(|i| i.split == Split::Id));
    assert!(data.test_ood.iter().all(|i| i.split == Split::Ood));
    assert!(data.sft.iter().all(|i| i.split == Split::Id));
    assert_eq!(data.pretrain.iter().filter(|i| i.split == Split::Ood).count(), 500);
}

#[test]
fn sweep_writes_resumes_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");

    let first = ExperimentConfig { ratio_sweep: vec![0.0], ..tiny() };
    let rows = pipeline::run_sweep(&first, &out).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 3 * 2);
    let partial = std::fs::read_to_string(&out).unwrap();

    // extending the grid keeps finished points and appends the new ones
    let cfg = tiny();
    let rows = pipeline::run_sweep(&cfg, &out).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2 * 3 * 2);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(pipeline::read_sweep_csv(&text).unwrap(), rows);
    let kept: Vec<_> = pipeline::read_sweep_csv(&partial).unwrap();
    assert!(kept.iter().all(|r| rows.contains(r)));
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.em) && (0.0..=1.0).contains(&r.bleu)));

    // a finished sweep is a no-op
    pipeline::run_sweep(&cfg, &out).unwrap();
    assert_eq!(std::fs::read_to_string(&out).unwrap(), text);

    let (summary, csv, warnings) = pipeline::report(&text).unwrap();
    assert!(warnings.is_empty(), "{warnings:?}");
    assert!(summary.contains("depth_up | grpo_data OOD | eval OOD"));
    // ratio x grpo_data x eval split
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);

    let tampered = text.replacen("BASE", "SFT", 1);
    std::fs::write(&out, &tampered).unwrap();
    assert!(pipeline::run_sweep(&cfg, &out).is_err());
    assert!(pipeline::read_sweep_csv(&tampered).is_err());
}

#[test]
fn points_are_reproducible() {
    let cfg = tiny();
    let a = pipeline::run_point(&cfg, 0.25, 3).unwrap();
    let b = pipeline::run_point(&cfg, 0.25, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 12);
}
