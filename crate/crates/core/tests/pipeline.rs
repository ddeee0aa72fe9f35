use std::collections::BTreeMap;

use lgcl_core::backbone::ViTConfig;
use lgcl_core::config::{DatasetConfig, ExperimentConfig, ProviderConfig};
use lgcl_core::data::{split_tasks, SyntheticSpec};
use lgcl_core::langguide::{class_text, task_text, EmbeddingFile};
use lgcl_core::promptpool::PromptMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use lgcl_core::trainer::{load_dataset, prepare_backbone, run_experiment, run_with_backbone, RunOptions};

fn small_cfg(mode: PromptMode, tasks: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::synth_default(mode);
    cfg.name = "small".into();
    cfg.backbone = ViTConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        num_channels: 1,
    };
    cfg.pool.size = 4;
    cfg.pool.select = if mode == PromptMode::PromptTuning { 2 } else { 1 };
    cfg.pool.prompt_len = 2;
    cfg.pool.expert_len = 4;
    cfg.pool.general_len = 2;
    cfg.pool.expert_layers = vec![1];
    cfg.pool.general_layers = vec![0];
    cfg.tasks = tasks;
    cfg.epochs = 5;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.01;
    cfg.bootstrap.num_classes = 4;
    cfg.bootstrap.train_per_class = 40;
    cfg.bootstrap.val_per_class = 10;
    cfg.bootstrap.epochs = 10;
    cfg.bootstrap.learning_rate = 0.005;
    cfg.bootstrap.batch_size = 8;
    cfg.dataset = DatasetConfig::Synthetic(SyntheticSpec {
        num_classes: 4,
        first_class: 0,
        train_per_class: 20,
        test_per_class: 10,
        image_size: 8,
        channels: 1,
        noise_std: 0.1,
        seed: 5,
    });
    cfg
}

fn opts() -> RunOptions {
    RunOptions {
        eval_threads: 1,
        record_wall_time: false,
    }
}

#[test]
fn bootstrap_beats_twice_chance() {
    let cfg = small_cfg(PromptMode::PrefixTuning, 1);
    let (bb, report) = prepare_backbone(&cfg, &[0, 1, 2, 3]).unwrap();
    let report = report.unwrap();
    assert!(bb.is_frozen());
    assert!(report.val_accuracy > 2.0 / report.num_classes as f64, "{report:?}");
}

#[test]
fn single_task_run_learns_and_has_no_forgetting() {
    for mode in [PromptMode::PrefixTuning, PromptMode::PromptTuning] {
        let out = run_experiment(&small_cfg(mode, 1), &opts()).unwrap();
        let r = &out.report;
        assert_eq!(r.forgetting, vec![None]);
        assert_eq!(r.avg_accuracy[0], r.accuracy_matrix[0][0]);
        assert!(r.final_accuracy() >= 95.0, "{mode:?}: {}", r.final_accuracy());
    }
}

#[test]
fn frozen_keys_never_move() {
    let mut cfg = small_cfg(PromptMode::PrefixTuning, 2);
    cfg.pool.keys_frozen = true;
    let ds = load_dataset(&cfg).unwrap();
    let (bb, _) = prepare_backbone(&cfg, &ds.class_ids()).unwrap();
    let out = run_with_backbone(&cfg, &ds, bb, None, &opts()).unwrap();
    let provider = lgcl_core::trainer::build_provider(&cfg).unwrap();
    let splits = split_tasks(&ds, 2, cfg.seed).unwrap();
    let task_vectors: Vec<Vec<f64>> = splits
        .iter()
        .map(|s| {
            provider
                .encode(&task_text(&s.spec().class_names).unwrap(), lgcl_core::langguide::FeatureKind::Task)
                .unwrap()
                .vector()
                .to_vec()
        })
        .collect();
    let keys = out.learner.pool().keys().to_vec();
    let expected: Vec<f64> = (0..4).flat_map(|j| task_vectors[j % 2].clone()).collect();
    assert_eq!(keys, expected);
    assert_eq!(out.report.param_counts.keys, 0);
}

#[test]
fn file_backed_embeddings_run_end_to_end() {
    let base = small_cfg(PromptMode::PrefixTuning, 2);
    let ds = load_dataset(&base).unwrap();
    let mut embeddings = BTreeMap::new();
    let raw_dim = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut add = |text: String| {
        let v: Vec<f32> = (0..raw_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        embeddings.insert(text, v);
    };
    for s in split_tasks(&ds, 2, base.seed).unwrap() {
        add(task_text(&s.spec().class_names).unwrap());
        for name in &s.spec().class_names {
            add(class_text(name).unwrap());
        }
    }
    assert_eq!(embeddings.len(), 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("embeddings.json");
    let file = EmbeddingFile {
        dim: raw_dim,
        embeddings,
    };
    std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();

    let mut cfg = base.clone();
    cfg.provider = ProviderConfig::File {
        path: path.clone(),
        projection_seed: 4,
    };
    let (bb, _) = prepare_backbone(&cfg, &ds.class_ids()).unwrap();
    let out = run_with_backbone(&cfg, &ds, bb, None, &opts()).unwrap();
    assert_eq!(out.report.accuracy_matrix.len(), 2);
    assert!(out.report.tasks[1].epochs.iter().all(|e| e.task_loss > 0.0 && e.class_loss > 0.0));

    // a table lacking one prompt text fails loudly instead of falling back
    let mut partial = file.clone();
    let first = partial.embeddings.keys().next().unwrap().clone();
    partial.embeddings.remove(&first);
    std::fs::write(&path, serde_json::to_string(&partial).unwrap()).unwrap();
    let (bb, _) = prepare_backbone(&cfg, &ds.class_ids()).unwrap();
    let err = run_with_backbone(&cfg, &ds, bb, None, &opts()).unwrap_err();
    assert!(err.to_string().contains(&first), "{err}");
}

#[test]
fn evaluation_is_independent_of_thread_count() {
    let cfg = small_cfg(PromptMode::PromptTuning, 2);
    let ds = load_dataset(&cfg).unwrap();
    let (bb, _) = prepare_backbone(&cfg, &ds.class_ids()).unwrap();
    let one = run_with_backbone(&cfg, &ds, bb.clone(), None, &opts()).unwrap();
    let many = run_with_backbone(
        &cfg,
        &ds,
        bb,
        None,
        &RunOptions {
            eval_threads: 3,
            record_wall_time: false,
        },
    )
    .unwrap();
    assert_eq!(one.report.to_json().unwrap(), many.report.to_json().unwrap());
}

#[test]
fn outputs_round_trip_through_disk() {
    let mut cfg = small_cfg(PromptMode::PrefixTuning, 2);
    let dir = tempfile::tempdir().unwrap();
    cfg.output.dir = Some(dir.path().to_path_buf());
    let out = run_experiment(&cfg, &opts()).unwrap();
    let back = lgcl_core::trainer::ExperimentReport::load(&dir.path().join("report.json")).unwrap();
    assert_eq!(back.to_json().unwrap(), out.report.to_json().unwrap());
    assert!(back.config.output.dir.is_none());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let learner = lgcl_core::trainer::Learner::load(dir.path(), "learner").unwrap();
    // checkpoints store f32
    let expected: Vec<f64> = out.learner.pool().prompts().to_vec().iter().map(|&v| v as f32 as f64).collect();
    assert_eq!(learner.pool().prompts().to_vec(), expected);
}
