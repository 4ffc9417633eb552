//! Two-stage training: channel-wise contrastive pretraining with
//! cross-entropy, then progressive finetuning on confident samples with
//! supervised contrast.

mod metrics;
mod run;
mod state;
mod step;

use serde::{Deserialize, Serialize};

use crate::confident::{Predictor, SelectionMode};
use crate::corpus::{AugPolicy, LabeledImageSet};
use crate::error::{Error, Result};
use crate::losses::ContrastConfig;
use crate::nn::HeadSpec;

pub use metrics::{EpochRecord, RunMetrics, Summary};
pub use run::{train_stage1, train_stage2, RunContext, Trainer};
pub use state::{find_checkpoints, latest_checkpoint, TrainCheckpoint};
pub use step::{StepOutcome, StepStats};

/// Which stage an epoch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Self::Stage1 => 1,
            Self::Stage2 => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Self::Stage1),
            2 => Ok(Self::Stage2),
            _ => Err(Error::InvalidInput(format!("unknown stage {n}"))),
        }
    }
}

/// Learning-rate schedule across the stage boundary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Schedule {
    /// One cosine curve over both stages.
    #[default]
    Continue,
    /// Stage two restarts at `lr0` and anneals over its own epochs.
    Restart,
}

/// How a layer's contrastive terms are combined before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerReduction {
    /// Sum over anchors, as the loss is written.
    #[default]
    Sum,
    /// Divide the sum by the number of anchors, keeping the term on the
    /// scale of cross-entropy regardless of channel count.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub lambda: f64,
    pub batch_size: usize,
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub lr_floor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub ema_decay: f64,
    /// Use `min(decay, (1 + t)/(10 + t))` at update `t`.
    pub ema_warmup: bool,
    pub gamma: f64,
    pub selection_mode: SelectionMode,
    pub round_length: usize,
    pub tau_cwcl: f64,
    pub tau_supcon: f64,
    pub symmetrize: bool,
    /// Applies to the channel-wise term; SupCon is already a mean.
    pub cwcl_reduction: LayerReduction,
    pub stage2_schedule: Stage2Schedule,
    pub augment: AugPolicy,
    pub channel_head: HeadSpec,
    pub instance_head: HeadSpec,
    /// Write a checkpoint every this many epochs (and after the last one).
    pub checkpoint_every: usize,
    /// Images per forward pass during evaluation and selection.
    pub eval_chunk: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            batch_size: 128,
            lr0: 0.1,
            lr_floor: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs_stage1: 100,
            epochs_stage2: 200,
            ema_decay: 0.999,
            ema_warmup: true,
            gamma: 0.9,
            selection_mode: SelectionMode::Threshold,
            round_length: 10,
            tau_cwcl: 0.5,
            tau_supcon: 0.1,
            symmetrize: false,
            cwcl_reduction: LayerReduction::Sum,
            stage2_schedule: Stage2Schedule::Continue,
            augment: AugPolicy::default(),
            channel_head: HeadSpec::default(),
            instance_head: HeadSpec::default(),
            checkpoint_every: 10,
            eval_chunk: 256,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} is outside [0, 1]", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= 1.0) {
            return bad(format!("lr_floor {} is outside (0, 1]", self.lr_floor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} is outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} is negative", self.weight_decay));
        }
        if self.epochs_stage1 == 0 {
            return bad("epochs_stage1 must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} is outside [0, 1]", self.ema_decay));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} is outside (0, 1]", self.gamma));
        }
        if self.round_length == 0 {
            return bad("round_length must be positive".into());
        }
        if self.checkpoint_every == 0 || self.eval_chunk == 0 {
            return bad("checkpoint_every and eval_chunk must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.augment.hflip_prob) || self.augment.brightness_jitter < 0.0 {
            return bad("augmentation probabilities must lie in [0, 1]".into());
        }
        self.contrast().validate()
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            tau_cwcl: self.tau_cwcl,
            tau_supcon: self.tau_supcon,
            symmetrize: self.symmetrize,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_stage1 + self.epochs_stage2
    }

    /// Optimizer steps in one stage-one epoch over `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch < self.epochs_stage1 {
            Stage::Stage1
        } else {
            Stage::Stage2
        }
    }
}

fn cosine(lr0: f64, floor: f64, t: f64) -> f64 {
    floor + (lr0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Cosine annealing from `lr0` to `lr0·lr_floor`, constant within an epoch.
pub fn lr_at(plan: &TrainPlan, epoch: i64) -> Result<f64> {
    let total = plan.total_epochs() as i64;
    if epoch < 0 || epoch >= total.max(1) {
        return Err(Error::InvalidInput(format!("epoch {epoch} is outside 0..{total}")));
    }
    let floor = plan.lr0 * plan.lr_floor;
    let (e, span) = match plan.stage2_schedule {
        Stage2Schedule::Restart if epoch >= plan.epochs_stage1 as i64 => {
            (epoch - plan.epochs_stage1 as i64, plan.epochs_stage2 as i64)
        }
        Stage2Schedule::Restart => (epoch, plan.epochs_stage1 as i64),
        Stage2Schedule::Continue => (epoch, total),
    };
    if span <= 1 {
        return Ok(plan.lr0);
    }
    Ok(cosine(plan.lr0, floor, e as f64 / (span - 1) as f64))
}

/// Fraction of `set` whose argmax prediction equals the label.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, set: &LabeledImageSet, chunk: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let k = model.num_classes();
    let mut correct = 0usize;
    for (images, labels) in set.images().chunks(chunk.max(1)).zip(set.labels().chunks(chunk.max(1))) {
        let logits = model.logits(images)?;
        for (row, &y) in logits.chunks(k).zip(labels) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("evaluation logits".into()));
            }
            correct += usize::from(argmax(row) == y);
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
