use std::path::{Path, PathBuf};

use cwcl::config::{ExperimentConfig, StageMode};
use cwcl::confident::Predictor;
use cwcl::corpus::{empirical_noise_rate, load_noise_file, save_noise_file, LabeledImageSet, NoisyCorpus};
use cwcl::nn::{EmaState, Tensor4, TappedBackbone};
use cwcl::trainer::{evaluate, latest_checkpoint, RunContext, Summary, TrainCheckpoint, Trainer};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Identifies the config behind every file in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub group_hash: String,
    pub arm: String,
    pub artifacts: Vec<String>,
}

fn io_err(context: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::runtime(format!("{context} {}: {e}", path.display()))
}

fn load_sets(config: &ExperimentConfig, base: &Path) -> Result<(LabeledImageSet, LabeledImageSet), CliError> {
    let (train, test) = config.dataset.load(base).map_err(|e| CliError::config(e.to_string()))?;
    let train = match config.train_limit {
        Some(n) => train.truncated(n),
        None => train,
    };
    Ok((train, test))
}

fn write_manifest(config: &ExperimentConfig, artifacts: &[&str]) -> Result<(), CliError> {
    let dir = &config.out_dir;
    let path = dir.join("run.json");
    let mut manifest = match std::fs::read_to_string(&path) {
        Ok(text) => {
            let m: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
            if m.config_hash != config.config_hash() {
                return Err(CliError::config(format!(
                    "{} belongs to config {} but this config hashes to {}; use a fresh --out",
                    dir.display(),
                    m.config_hash,
                    config.config_hash()
                )));
            }
            m
        }
        Err(_) => RunManifest {
            config_hash: config.config_hash(),
            group_hash: config.group_hash(),
            arm: config.arm().into(),
            artifacts: Vec::new(),
        },
    };
    for a in artifacts {
        if !manifest.artifacts.iter().any(|x| x == a) {
            manifest.artifacts.push(a.to_string());
        }
    }
    manifest.artifacts.sort();
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| io_err("writing", &path, e))?;
    let cpath = dir.join("config.toml");
    std::fs::write(&cpath, config.to_toml()?).map_err(|e| io_err("writing", &cpath, e))
}

fn prepare_dir(config: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&config.out_dir).map_err(|e| io_err("creating", &config.out_dir, e))?;
    write_manifest(config, &[])
}

/// Injects label noise, writes `noise.csv`, and returns the empirical noise
/// rate.
pub fn cmd_inject(config: &ExperimentConfig, base: &Path) -> Result<f64, CliError> {
    let (train, _) = load_sets(config, base)?;
    let corpus = NoisyCorpus::inject(train, config.noise.clone(), config.seed)?;
    prepare_dir(config)?;
    save_noise_file(&corpus, &config.out_dir.join("noise.csv"))?;
    write_manifest(config, &["noise.csv"])?;
    Ok(empirical_noise_rate(&corpus)?)
}

/// Loads the run's overlay if present, otherwise injects and persists it.
fn noisy_corpus(config: &ExperimentConfig, train: LabeledImageSet) -> Result<NoisyCorpus, CliError> {
    let path = config.out_dir.join("noise.csv");
    if path.exists() {
        let overlay = load_noise_file(&path, train.num_classes())?;
        Ok(NoisyCorpus::from_overlay(train, overlay, config.noise.clone(), config.seed)?)
    } else {
        let corpus = NoisyCorpus::inject(train, config.noise.clone(), config.seed)?;
        save_noise_file(&corpus, &path)?;
        write_manifest(config, &["noise.csv"])?;
        Ok(corpus)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub dry_run: bool,
    pub resume: bool,
    /// Stop after this many epochs, as if interrupted.
    pub stop_after: Option<usize>,
}

fn code_version() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// Runs the configured stages. Returns the run directory, or `None` for a
/// dry run.
pub fn cmd_train(config: &ExperimentConfig, base: &Path, opts: TrainOptions) -> Result<Option<PathBuf>, CliError> {
    let (train, test) = load_sets(config, base)?;
    if opts.dry_run {
        let model = TappedBackbone::new(config.backbone.clone(), train.image_shape(), train.num_classes(), config.seed)?;
        let probe = Tensor4::from_images(train.images().iter().take(2), train.image_shape())?;
        let out = model.forward(&probe)?;
        println!(
            "config {} ok: {} train / {} test images of {}, {} classes, taps {:?}, {} parameters",
            config.config_hash(),
            train.len(),
            test.len(),
            train.image_shape(),
            out.num_classes,
            model.tap_shapes(),
            model.state_dict().num_values()
        );
        return Ok(None);
    }
    prepare_dir(config)?;
    let corpus = noisy_corpus(config, train)?;
    let plan = config.plan();
    let ctx = RunContext {
        dir: Some(config.out_dir.clone()),
        config_hash: config.config_hash(),
        stop_after: opts.stop_after,
    };
    let latest = if opts.resume { latest_checkpoint(&config.out_dir)? } else { None };
    let mut trainer = match latest {
        Some(dir) => {
            let ckpt = TrainCheckpoint::load(&dir)?;
            log::info!("resuming from {} ({} epochs done)", dir.display(), ckpt.epochs_completed);
            Trainer::from_checkpoint(plan.clone(), &corpus, &test, ckpt, ctx)?
        }
        None => Trainer::new(plan.clone(), &corpus, &test, config.backbone.clone(), ctx)?,
    };
    let mut finished = trainer.run_stage1()?;
    if finished && config.stage == StageMode::Full && plan.epochs_stage2 > 0 {
        finished = trainer.run_stage2()?;
    }
    write_manifest(config, &["metrics.csv", "ckpt", "config.toml"])?;
    if !finished {
        log::info!("stopped after {} epochs", trainer.epochs_completed());
        return Ok(Some(config.out_dir.clone()));
    }
    let metrics = trainer.metrics();
    let last = metrics.last().ok_or_else(|| CliError::runtime("no epochs were run"))?;
    let best = metrics.best().expect("non-empty metrics");
    let summary = Summary {
        config_hash: config.config_hash(),
        group_hash: config.group_hash(),
        seed: config.seed,
        noise_kind: config.noise.kind.to_string(),
        noise_rate: config.noise.rate,
        arm: config.arm().into(),
        epochs_completed: trainer.epochs_completed(),
        final_test_acc_ema: last.test_acc_ema,
        final_test_acc_live: last.test_acc_live,
        best_epoch: best.epoch,
        best_test_acc_ema: best.test_acc_ema,
        corpus_noise_rate: empirical_noise_rate(&corpus)?,
        final_selection_noise_rate: last.selection_noise_rate,
        code_version: code_version(),
        config: serde_json::to_value(config).expect("config serializes"),
    };
    summary.write(&config.out_dir.join("summary.json"))?;
    let mut artifacts = vec!["summary.json"];
    if config.stage == StageMode::Full && plan.epochs_stage2 > 0 {
        artifacts.push("confident");
    }
    write_manifest(config, &artifacts)?;
    println!(
        "{}: test accuracy {:.4} (ema) / {:.4} (live)",
        config.out_dir.display(),
        last.test_acc_ema,
        last.test_acc_live
    );
    Ok(Some(config.out_dir.clone()))
}

#[derive(Debug, Serialize)]
struct EvalRecord<'a> {
    checkpoint: &'a str,
    config_hash: &'a str,
    epochs_completed: usize,
    test_acc_live: f64,
    test_acc_ema: f64,
}

/// Evaluates a checkpoint. Nothing is written unless evaluation succeeds.
pub fn cmd_eval(config: &ExperimentConfig, base: &Path, checkpoint: &Path) -> Result<(f64, f64), CliError> {
    let ckpt = TrainCheckpoint::load(checkpoint)?;
    let (_, test) = load_sets(config, base)?;
    if ckpt.input != test.image_shape() || ckpt.num_classes != test.num_classes() {
        return Err(CliError::runtime(format!(
            "checkpoint expects {} images over {} classes but the test set has {} over {}",
            ckpt.input,
            ckpt.num_classes,
            test.image_shape(),
            test.num_classes()
        )));
    }
    let mut live = TappedBackbone::new(ckpt.backbone.clone(), ckpt.input, ckpt.num_classes, 0)?;
    live.load_state_dict(&ckpt.model)?;
    let mut ema = EmaState::new(config.train.ema_decay)?;
    ema.restore(ckpt.ema_shadow.clone(), ckpt.ema_updates);
    let ema_model = ema.snapshot_for_eval(&live)?;
    let chunk = config.train.eval_chunk;
    let acc_live = evaluate(&live as &dyn Predictor, &test, chunk)?;
    let acc_ema = evaluate(&ema_model as &dyn Predictor, &test, chunk)?;
    let name = checkpoint.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let record = EvalRecord {
        checkpoint: &name,
        config_hash: &ckpt.config_hash,
        epochs_completed: ckpt.epochs_completed,
        test_acc_live: acc_live,
        test_acc_ema: acc_ema,
    };
    let path = checkpoint.join("eval.json");
    let text = serde_json::to_string_pretty(&record).expect("record serializes");
    std::fs::write(&path, text + "\n").map_err(|e| io_err("writing", &path, e))?;
    Ok((acc_live, acc_ema))
}
