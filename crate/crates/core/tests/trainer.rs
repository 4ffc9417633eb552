use std::collections::BTreeSet;
use std::path::Path;

use cwcl::confident::{read_selection, SelectionMode};
use cwcl::corpus::datasets::{synthetic, SyntheticSpec};
use cwcl::corpus::{LabeledImageSet, NoiseSpec, NoisyCorpus};
use cwcl::nn::BackboneSpec;
use cwcl::trainer::{latest_checkpoint, RunContext, RunMetrics, TrainCheckpoint, TrainPlan, Trainer};
use cwcl::Error;

fn tiny_data(train: usize) -> (NoisyCorpus, LabeledImageSet) {
    let spec = SyntheticSpec {
        num_classes: 4,
        side: 8,
        train_size: train,
        test_size: 16,
        ..SyntheticSpec::default()
    };
    let (tr, te) = synthetic(&spec).unwrap();
    (NoisyCorpus::inject(tr, NoiseSpec::symmetric(0.25), 3).unwrap(), te)
}

fn tiny_backbone() -> BackboneSpec {
    BackboneSpec {
        stem_width: 8,
        widths: vec![8, 16],
        blocks: vec![1, 1],
        strides: vec![1, 2],
    }
}

fn tiny_plan() -> TrainPlan {
    TrainPlan {
        batch_size: 16,
        epochs_stage1: 2,
        epochs_stage2: 2,
        round_length: 1,
        gamma: 0.01,
        checkpoint_every: 1,
        ema_decay: 0.9,
        seed: 5,
        ..TrainPlan::default()
    }
}

fn ctx(dir: Option<&Path>) -> RunContext {
    RunContext {
        dir: dir.map(Path::to_path_buf),
        config_hash: "feedfacecafebeef".into(),
        stop_after: None,
    }
}

#[test]
fn ten_samples_make_one_step() {
    let plan = TrainPlan::default();
    assert_eq!(plan.steps_per_epoch(10), 1);
    assert_eq!(plan.steps_per_epoch(128), 1);
    assert_eq!(plan.steps_per_epoch(129), 2);
}

#[test]
fn lambda_zero_logs_no_contrast() {
    let (corpus, test) = tiny_data(32);
    let plan = TrainPlan {
        lambda: 0.0,
        epochs_stage2: 0,
        ..tiny_plan()
    };
    let mut t = Trainer::new(plan, &corpus, &test, tiny_backbone(), ctx(None)).unwrap();
    assert!(t.run_stage1().unwrap());
    for r in &t.metrics().records {
        assert_eq!(r.contrastive_mean, 0.0);
        assert_eq!(r.total, r.ce);
    }
}

#[test]
fn logged_parts_recombine_and_runs_are_reproducible() {
    let (corpus, test) = tiny_data(40);
    let run = || {
        let mut t = Trainer::new(tiny_plan(), &corpus, &test, tiny_backbone(), ctx(None)).unwrap();
        t.run_stage1().unwrap();
        t.run_stage2().unwrap();
        t.metrics().clone()
    };
    let m = run();
    assert_eq!(m.records.len(), 4);
    for r in &m.records {
        let lambda = 0.6;
        assert!((r.total - ((1.0 - lambda) * r.ce + lambda * r.contrastive_mean)).abs() < 1e-12);
        assert!(r.contrastive_mean > 0.0);
        assert_eq!(r.selection_noise_rate.is_some(), r.stage == 2);
    }
    assert_eq!(run(), m);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let (corpus, test) = tiny_data(40);
    let full_dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(tiny_plan(), &corpus, &test, tiny_backbone(), ctx(Some(full_dir.path()))).unwrap();
    full.run_stage1().unwrap();
    full.run_stage2().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut c = ctx(Some(dir.path()));
    c.stop_after = Some(3);
    let mut first = Trainer::new(tiny_plan(), &corpus, &test, tiny_backbone(), c).unwrap();
    assert!(first.run_stage1().unwrap());
    assert!(!first.run_stage2().unwrap());
    drop(first);

    let latest = latest_checkpoint(dir.path()).unwrap().unwrap();
    let ckpt = TrainCheckpoint::load(&latest).unwrap();
    assert_eq!(ckpt.epochs_completed, 3);
    let mut resumed = Trainer::from_checkpoint(tiny_plan(), &corpus, &test, ckpt, ctx(Some(dir.path()))).unwrap();
    resumed.run_stage1().unwrap();
    resumed.run_stage2().unwrap();
    assert_eq!(resumed.metrics(), full.metrics());
    assert_eq!(
        RunMetrics::read_csv(&dir.path().join("metrics.csv")).unwrap(),
        RunMetrics::read_csv(&full_dir.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn resume_refuses_another_config() {
    let (corpus, test) = tiny_data(32);
    let dir = tempfile::tempdir().unwrap();
    let plan = TrainPlan {
        epochs_stage2: 0,
        epochs_stage1: 1,
        ..tiny_plan()
    };
    let mut t = Trainer::new(plan.clone(), &corpus, &test, tiny_backbone(), ctx(Some(dir.path()))).unwrap();
    t.run_stage1().unwrap();
    let ckpt = TrainCheckpoint::load(&latest_checkpoint(dir.path()).unwrap().unwrap()).unwrap();
    let mut other = ctx(Some(dir.path()));
    other.config_hash = "0000000000000000".into();
    let err = Trainer::from_checkpoint(plan, &corpus, &test, ckpt, other).err().unwrap();
    assert!(err.is_config_error(), "{err}");
}

#[test]
fn stage_two_trains_only_on_the_current_selection() {
    let (corpus, test) = tiny_data(48);
    let dir = tempfile::tempdir().unwrap();
    let plan = TrainPlan {
        gamma: 0.5,
        selection_mode: SelectionMode::Quantile { fraction: 0.5 },
        ..tiny_plan()
    };
    let mut t = Trainer::new(plan, &corpus, &test, tiny_backbone(), ctx(Some(dir.path()))).unwrap();
    t.run_stage1().unwrap();
    t.run_stage2().unwrap();
    assert_eq!(t.trained_by_round().len(), 2);
    for (&round, trained) in t.trained_by_round() {
        let sel = read_selection(&dir.path().join(format!("confident/round-{round}.csv")), round, 0.5).unwrap();
        assert!(sel.len() < corpus.len());
        let allowed: BTreeSet<usize> = sel.indices.iter().copied().collect();
        assert!(!trained.is_empty());
        assert!(trained.is_subset(&allowed), "round {round}: {trained:?} vs {allowed:?}");
    }
}

#[test]
fn empty_round_reuses_the_last_selection() {
    let (corpus, test) = tiny_data(40);
    let dir = tempfile::tempdir().unwrap();
    let mut c = ctx(Some(dir.path()));
    c.stop_after = Some(3);
    let mut t = Trainer::new(tiny_plan(), &corpus, &test, tiny_backbone(), c).unwrap();
    t.run_stage1().unwrap();
    t.run_stage2().unwrap();
    let round0 = t.selection().unwrap().clone();
    assert!(!round0.is_empty());
    let ckpt = t.checkpoint().unwrap();
    drop(t);

    // Nothing reaches a threshold of 1 after a few steps.
    let strict = TrainPlan {
        gamma: 1.0,
        ..tiny_plan()
    };
    let mut t = Trainer::from_checkpoint(strict, &corpus, &test, ckpt, ctx(Some(dir.path()))).unwrap();
    t.run_stage2().unwrap();
    let reused = t.selection().unwrap();
    assert_eq!(reused.round, 1);
    assert_eq!(reused.indices, round0.indices);
    assert_eq!(reused.scores, round0.scores);
    let on_disk = read_selection(&dir.path().join("confident/round-1.csv"), 1, 1.0).unwrap();
    assert_eq!(on_disk.indices, round0.indices);
}

#[test]
fn empty_first_round_aborts() {
    let (corpus, test) = tiny_data(32);
    let plan = TrainPlan {
        gamma: 1.0,
        epochs_stage1: 1,
        ..tiny_plan()
    };
    let mut t = Trainer::new(plan, &corpus, &test, tiny_backbone(), ctx(None)).unwrap();
    t.run_stage1().unwrap();
    match t.run_stage2() {
        Err(Error::Aborted(m)) => assert!(m.contains("lower gamma"), "{m}"),
        other => panic!("expected an abort, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn divergence_aborts_with_a_dump() {
    let (corpus, test) = tiny_data(64);
    let dir = tempfile::tempdir().unwrap();
    let plan = TrainPlan {
        lr0: 1e30,
        epochs_stage2: 0,
        ..tiny_plan()
    };
    let mut t = Trainer::new(plan, &corpus, &test, tiny_backbone(), ctx(Some(dir.path()))).unwrap();
    let err = t.run_stage1().err().expect("training must diverge");
    assert!(matches!(err, Error::Aborted(ref m) if m.contains("batch indices")), "{err}");
    let dumps: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("abort-epoch"))
        .collect();
    assert_eq!(dumps.len(), 1);
    let dump: serde_json::Value = serde_json::from_slice(&std::fs::read(dumps[0].path()).unwrap()).unwrap();
    assert_eq!(dump["config_hash"], "feedfacecafebeef");
    assert!(!dump["batch_indices"].as_array().unwrap().is_empty());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let (corpus, test) = tiny_data(32);
    let dir = tempfile::tempdir().unwrap();
    let plan = TrainPlan {
        epochs_stage1: 1,
        epochs_stage2: 0,
        ..tiny_plan()
    };
    let mut t = Trainer::new(plan, &corpus, &test, tiny_backbone(), ctx(Some(dir.path()))).unwrap();
    t.run_stage1().unwrap();
    let latest = latest_checkpoint(dir.path()).unwrap().unwrap();
    assert!(TrainCheckpoint::load(&latest).is_ok());
    let path = latest.join("model.tensors");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(TrainCheckpoint::load(&latest).is_err());
}
