use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;

use super::state::TrainCheckpoint;
use super::step::{train_step, Nets, StepOutcome};
use super::{evaluate, lr_at, EpochRecord, RunMetrics, Stage, TrainPlan};
use crate::confident::{select_confident, selection_noise_rate, write_selection, ClassBalancedSampler, ConfidentSet, SelectConfig};
use crate::corpus::{Augmenter, Image, LabeledImageSet, NoisyCorpus};
use crate::error::{Error, Result};
use crate::nn::{BackboneSpec, EmaState, Sgd, SgdConfig, StateDict, TappedBackbone};
use crate::rng::{stream, Purpose};

/// Where a run writes its artifacts and what ties them to a config.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    /// Run directory; `None` keeps everything in memory.
    pub dir: Option<PathBuf>,
    pub config_hash: String,
    /// Stop (as if interrupted) once this many epochs are complete.
    pub stop_after: Option<usize>,
}

/// Owns the model, heads, optimizer and EMA for one run.
pub struct Trainer<'a> {
    plan: TrainPlan,
    corpus: &'a NoisyCorpus,
    testset: &'a LabeledImageSet,
    ctx: RunContext,
    nets: Nets,
    ema: EmaState,
    optim: Sgd,
    augmenter: Augmenter,
    epochs_completed: usize,
    step: u64,
    selection: Option<ConfidentSet>,
    last_nonempty: Option<ConfidentSet>,
    metrics: RunMetrics,
    trained: BTreeMap<u64, BTreeSet<usize>>,
}

fn sgd(plan: &TrainPlan) -> Sgd {
    Sgd::new(SgdConfig {
        momentum: plan.momentum as f32,
        weight_decay: plan.weight_decay as f32,
    })
}

fn sub_state(state: &StateDict, prefix: &str) -> StateDict {
    StateDict {
        entries: state
            .entries
            .iter()
            .filter(|(n, _)| n.strip_prefix(prefix).is_some_and(|r| r.starts_with('.')))
            .cloned()
            .collect(),
    }
}

impl<'a> Trainer<'a> {
    pub fn new(
        plan: TrainPlan,
        corpus: &'a NoisyCorpus,
        testset: &'a LabeledImageSet,
        backbone: BackboneSpec,
        ctx: RunContext,
    ) -> Result<Self> {
        plan.validate()?;
        let shape = corpus.base().image_shape();
        if testset.image_shape() != shape || testset.num_classes() != corpus.num_classes() {
            return Err(Error::shape(
                "test set",
                format!("{shape} images over {} classes", corpus.num_classes()),
                format!("{} images over {} classes", testset.image_shape(), testset.num_classes()),
            ));
        }
        let model = TappedBackbone::new(backbone, shape, corpus.num_classes(), plan.seed)?;
        let nets = Nets::new(model, plan.channel_head, plan.instance_head, plan.seed)?;
        let ema = EmaState::from_model(&nets.model, plan.ema_decay)?.with_warmup(plan.ema_warmup);
        Ok(Self {
            optim: sgd(&plan),
            augmenter: Augmenter::new(plan.augment, shape),
            plan,
            corpus,
            testset,
            ctx,
            nets,
            ema,
            epochs_completed: 0,
            step: 0,
            selection: None,
            last_nonempty: None,
            metrics: RunMetrics::default(),
            trained: BTreeMap::new(),
        })
    }

    /// Continues from a checkpoint. Refuses a checkpoint written under a
    /// different config hash.
    pub fn from_checkpoint(
        plan: TrainPlan,
        corpus: &'a NoisyCorpus,
        testset: &'a LabeledImageSet,
        ckpt: TrainCheckpoint,
        ctx: RunContext,
    ) -> Result<Self> {
        if ckpt.config_hash != ctx.config_hash {
            return Err(Error::Config(format!(
                "checkpoint was written with config {} but this run uses {}; refusing to resume",
                ckpt.config_hash, ctx.config_hash
            )));
        }
        if ckpt.input != corpus.base().image_shape() || ckpt.num_classes != corpus.num_classes() {
            return Err(Error::Checkpoint("checkpoint architecture does not match the corpus".into()));
        }
        let mut t = Self::new(plan, corpus, testset, ckpt.backbone.clone(), ctx)?;
        t.nets.model.load_state_dict(&ckpt.model)?;
        for (l, h) in t.nets.channel_heads.iter_mut().enumerate() {
            let p = format!("channel.{l}");
            h.load_state_dict(&p, &sub_state(&ckpt.heads, &p))?;
        }
        for (l, h) in t.nets.instance_heads.iter_mut().enumerate() {
            let p = format!("instance.{l}");
            h.load_state_dict(&p, &sub_state(&ckpt.heads, &p))?;
        }
        t.ema.restore(ckpt.ema_shadow, ckpt.ema_updates);
        t.ema.snapshot_state()?.check_compatible(&t.nets.model.state_dict(), "EMA state")?;
        t.optim.load_state(ckpt.optim);
        t.epochs_completed = ckpt.epochs_completed;
        t.step = ckpt.step;
        t.selection = ckpt.selection;
        t.last_nonempty = ckpt.last_nonempty;
        t.metrics = ckpt.metrics;
        Ok(t)
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    pub fn epochs_completed(&self) -> usize {
        self.epochs_completed
    }

    pub fn model(&self) -> &TappedBackbone {
        &self.nets.model
    }

    pub fn ema_model(&self) -> Result<TappedBackbone> {
        self.ema.snapshot_for_eval(&self.nets.model)
    }

    pub fn selection(&self) -> Option<&ConfidentSet> {
        self.selection.as_ref()
    }

    /// Indices trained on in each stage-two round.
    pub fn trained_by_round(&self) -> &BTreeMap<u64, BTreeSet<usize>> {
        &self.trained
    }

    fn heads_state(&self) -> StateDict {
        let mut entries = Vec::new();
        for (l, h) in self.nets.channel_heads.iter().enumerate() {
            entries.extend(h.state_dict(&format!("channel.{l}")).entries);
        }
        for (l, h) in self.nets.instance_heads.iter().enumerate() {
            entries.extend(h.state_dict(&format!("instance.{l}")).entries);
        }
        StateDict { entries }
    }

    pub fn checkpoint(&self) -> Result<TrainCheckpoint> {
        Ok(TrainCheckpoint {
            config_hash: self.ctx.config_hash.clone(),
            stage: self.plan.stage_of(self.epochs_completed.saturating_sub(1)),
            epochs_completed: self.epochs_completed,
            step: self.step,
            backbone: self.nets.model.spec().clone(),
            input: self.nets.model.input_shape(),
            num_classes: self.nets.model.num_classes(),
            model: self.nets.model.state_dict(),
            ema_shadow: self.ema.shadow()?.to_vec(),
            ema_updates: self.ema.updates(),
            heads: self.heads_state(),
            optim: self.optim.state(),
            selection: self.selection.clone(),
            last_nonempty: self.last_nonempty.clone(),
            metrics: self.metrics.clone(),
        })
    }

    fn interrupted(&self) -> bool {
        self.ctx.stop_after.is_some_and(|s| self.epochs_completed >= s)
    }

    /// Runs the remaining stage-one epochs. Returns `false` if stopped early.
    pub fn run_stage1(&mut self) -> Result<bool> {
        while self.epochs_completed < self.plan.epochs_stage1 {
            if self.interrupted() {
                return Ok(false);
            }
            self.stage1_epoch()?;
        }
        Ok(true)
    }

    /// Runs the remaining stage-two epochs. Returns `false` if stopped early.
    pub fn run_stage2(&mut self) -> Result<bool> {
        if self.epochs_completed < self.plan.epochs_stage1 {
            return Err(Error::InvalidInput("stage two needs a completed stage one".into()));
        }
        while self.epochs_completed < self.plan.total_epochs() {
            if self.interrupted() {
                return Ok(false);
            }
            self.stage2_epoch()?;
        }
        Ok(true)
    }

    fn views_for(&self, indices: &[usize], epoch: usize, offset: usize) -> Result<Vec<Image>> {
        let images = self.corpus.images();
        let mut a = Vec::with_capacity(2 * indices.len());
        let mut b = Vec::with_capacity(indices.len());
        for (pos, &i) in indices.iter().enumerate() {
            let mut rng = stream(self.plan.seed, Purpose::Augment, epoch as u64, (offset + pos) as u64);
            let pair = self.augmenter.view_pair(&images[i], i, &mut rng)?;
            a.push(pair.view_a);
            b.push(pair.view_b);
        }
        a.extend(b);
        Ok(a)
    }

    fn abort(&self, epoch: usize, step: usize, indices: &[usize], what: &str) -> Error {
        let msg = format!("non-finite loss at epoch {epoch}, step {step} ({what}); batch indices {indices:?}");
        if let Some(dir) = &self.ctx.dir {
            let dump = serde_json::json!({
                "epoch": epoch,
                "step": step,
                "reason": what,
                "batch_indices": indices,
                "config_hash": self.ctx.config_hash,
            });
            let path = dir.join(format!("abort-epoch{epoch}-step{step}.json"));
            if let Err(e) = std::fs::write(&path, dump.to_string()) {
                log::error!("could not write {}: {e}", path.display());
            }
        }
        Error::Aborted(msg)
    }

    /// Trains one batch and applies the optimizer and EMA updates.
    fn train_batch(&mut self, indices: &[usize], epoch: usize, step: usize, stage: Stage, acc: &mut EpochAccumulator) -> Result<()> {
        let views = self.views_for(indices, epoch, step * self.plan.batch_size)?;
        let labels: Vec<usize> = indices.iter().map(|&i| self.corpus.noisy_labels()[i]).collect();
        let outcome = train_step(&mut self.nets, views.iter().collect(), &labels, &self.plan, stage)?;
        let stats = match outcome {
            StepOutcome::Trained(s) => s,
            StepOutcome::NonFinite(what) => return Err(self.abort(epoch, step, indices, &what)),
        };
        let lr = lr_at(&self.plan, epoch as i64)? as f32;
        self.optim.step(lr, &mut self.nets.modules())?;
        self.ema.update(&self.nets.model)?;
        self.step += 1;
        acc.add(&stats.parts.ce, &stats.parts.contrastive_per_layer, stats.correct, stats.seen);
        Ok(())
    }

    fn stage1_epoch(&mut self) -> Result<()> {
        let epoch = self.epochs_completed;
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        order.shuffle(&mut stream(self.plan.seed, Purpose::Shuffle, epoch as u64, 0));
        let mut acc = EpochAccumulator::new(self.nets.model.num_taps());
        for (s, batch) in order.chunks(self.plan.batch_size).enumerate() {
            self.train_batch(batch, epoch, s, Stage::Stage1, &mut acc)?;
        }
        self.finish_epoch(epoch, Stage::Stage1, acc, None)
    }

    fn select(&mut self, round: u64) -> Result<()> {
        let ema = self.ema_model()?;
        let config = SelectConfig {
            gamma: self.plan.gamma,
            mode: self.plan.selection_mode,
            seed: self.plan.seed,
            chunk: self.plan.eval_chunk,
        };
        let fresh = select_confident(&ema, self.corpus, &self.augmenter, &config, round)?;
        let chosen = if fresh.is_empty() {
            match &self.last_nonempty {
                Some(prev) => {
                    log::warn!(
                        "round {round}: no sample reached γ = {}; reusing the {} samples of round {}",
                        self.plan.gamma,
                        prev.len(),
                        prev.round
                    );
                    prev.reused_for(round)
                }
                None => {
                    return Err(Error::Aborted(format!(
                        "round {round}: no sample reached γ = {} and there is no earlier selection; lower gamma",
                        self.plan.gamma
                    )))
                }
            }
        } else {
            self.last_nonempty = Some(fresh.clone());
            fresh
        };
        if let Some(dir) = &self.ctx.dir {
            let cdir = dir.join("confident");
            std::fs::create_dir_all(&cdir).map_err(|e| Error::io(format!("creating {}", cdir.display()), e))?;
            write_selection(&cdir.join(format!("round-{round}.csv")), &chosen)?;
        }
        self.selection = Some(chosen);
        Ok(())
    }

    fn stage2_epoch(&mut self) -> Result<()> {
        let epoch = self.epochs_completed;
        let local = epoch - self.plan.epochs_stage1;
        let round = (local / self.plan.round_length) as u64;
        if local % self.plan.round_length == 0 || self.selection.as_ref().is_none_or(|s| s.round != round) {
            self.select(round)?;
        }
        let selection = self.selection.clone().expect("selection made above");
        let sampler = ClassBalancedSampler::new(&selection, self.corpus.noisy_labels())?;
        let steps = self.plan.steps_per_epoch(selection.len());
        let mut acc = EpochAccumulator::new(self.nets.model.num_taps());
        for s in 0..steps {
            let mut rng = stream(self.plan.seed, Purpose::Sampler, epoch as u64, s as u64);
            let batch = sampler.batch(self.plan.batch_size, &mut rng)?;
            self.trained.entry(round).or_default().extend(batch.iter().copied());
            self.train_batch(&batch, epoch, s, Stage::Stage2, &mut acc)?;
        }
        self.finish_epoch(epoch, Stage::Stage2, acc, Some(selection))
    }

    fn finish_epoch(&mut self, epoch: usize, stage: Stage, acc: EpochAccumulator, selection: Option<ConfidentSet>) -> Result<()> {
        let ema_model = self.ema_model()?;
        let test_acc_live = evaluate(&self.nets.model, self.testset, self.plan.eval_chunk)?;
        let test_acc_ema = evaluate(&ema_model, self.testset, self.plan.eval_chunk)?;
        let (ce, contrastive_mean) = acc.means();
        let lambda = self.plan.lambda;
        let record = EpochRecord {
            epoch,
            stage: stage.number(),
            lr: lr_at(&self.plan, epoch as i64)?,
            ce,
            contrastive_mean,
            total: (1.0 - lambda) * ce + lambda * contrastive_mean,
            train_acc_noisy: acc.accuracy(),
            test_acc_live,
            test_acc_ema,
            selection_size: selection.as_ref().map_or(0, |s| s.len()),
            selection_noise_rate: selection
                .as_ref()
                .map(|s| selection_noise_rate(s, self.corpus.flip_mask()))
                .transpose()?,
        };
        log::info!(
            "epoch {epoch} stage {} lr {:.5} ce {:.4} contrast {:.4} train {:.3} test {:.3}/{:.3}",
            stage.number(),
            record.lr,
            ce,
            contrastive_mean,
            record.train_acc_noisy,
            test_acc_live,
            test_acc_ema
        );
        self.metrics.push(record);
        self.epochs_completed += 1;
        if let Some(dir) = self.ctx.dir.clone() {
            self.metrics.write_csv(&dir.join("metrics.csv"))?;
            let last_of_stage = self.epochs_completed == self.plan.epochs_stage1 || self.epochs_completed == self.plan.total_epochs();
            if self.epochs_completed % self.plan.checkpoint_every == 0 || last_of_stage {
                self.checkpoint()?.save(&dir)?;
            }
        }
        Ok(())
    }
}

/// Running sums over one epoch's steps.
struct EpochAccumulator {
    steps: usize,
    ce: f64,
    layers: Vec<f64>,
    correct: usize,
    seen: usize,
}

impl EpochAccumulator {
    fn new(layers: usize) -> Self {
        Self {
            steps: 0,
            ce: 0.0,
            layers: vec![0.0; layers],
            correct: 0,
            seen: 0,
        }
    }

    fn add(&mut self, ce: &f64, layers: &[f64], correct: usize, seen: usize) {
        self.steps += 1;
        self.ce += ce;
        self.layers.iter_mut().zip(layers).for_each(|(a, b)| *a += b);
        self.correct += correct;
        self.seen += seen;
    }

    /// Mean CE and mean (over steps and layers) contrastive value.
    fn means(&self) -> (f64, f64) {
        let n = self.steps.max(1) as f64;
        let layer_mean = self.layers.iter().sum::<f64>() / self.layers.len().max(1) as f64;
        (self.ce / n, layer_mean / n)
    }

    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.seen.max(1) as f64
    }
}

/// Runs stage one from scratch and returns the final checkpoint.
pub fn train_stage1(
    plan: &TrainPlan,
    corpus: &NoisyCorpus,
    testset: &LabeledImageSet,
    backbone: BackboneSpec,
    ctx: RunContext,
) -> Result<(TrainCheckpoint, RunMetrics)> {
    let mut t = Trainer::new(plan.clone(), corpus, testset, backbone, ctx)?;
    t.run_stage1()?;
    Ok((t.checkpoint()?, t.metrics.clone()))
}

/// Runs stage two from a stage-one checkpoint.
pub fn train_stage2(
    plan: &TrainPlan,
    corpus: &NoisyCorpus,
    testset: &LabeledImageSet,
    checkpoint: TrainCheckpoint,
    ctx: RunContext,
) -> Result<(TrainCheckpoint, RunMetrics)> {
    let mut t = Trainer::from_checkpoint(plan.clone(), corpus, testset, checkpoint, ctx)?;
    t.run_stage2()?;
    Ok((t.checkpoint()?, t.metrics.clone()))
}

