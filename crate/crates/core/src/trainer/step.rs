use ndarray::{Array2, ArrayView2};

use super::{argmax, LayerReduction, Stage, TrainPlan};
use crate::corpus::Image;
use crate::error::{Error, Result};
use crate::losses::{ce_loss_grad, paired_contrast_grad, supcon_loss_grad, stage1_total, stage2_total, LossGrad, StageLossParts};
use crate::nn::{HeadSpec, Parameterized, ProjectionHead, Tensor4, TappedBackbone};
use crate::par;

/// Loss bookkeeping for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub parts: StageLossParts,
    /// Argmax matches against the (noisy) training labels, both views.
    pub correct: usize,
    pub seen: usize,
}

/// Result of a step that may have been skipped.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Trained(StepStats),
    NonFinite(String),
}

/// The backbone and its training-only projection heads.
#[derive(Debug, Clone)]
pub(crate) struct Nets {
    pub model: TappedBackbone,
    pub channel_heads: Vec<ProjectionHead>,
    pub instance_heads: Vec<ProjectionHead>,
}

impl Nets {
    pub fn new(model: TappedBackbone, channel: HeadSpec, instance: HeadSpec, seed: u64) -> Result<Self> {
        let taps = model.tap_shapes();
        let channel_heads = taps
            .iter()
            .enumerate()
            .map(|(l, &t)| ProjectionHead::channel(l, t, channel, seed))
            .collect::<Result<_>>()?;
        let instance_heads = taps
            .iter()
            .enumerate()
            .map(|(l, &t)| ProjectionHead::instance(l, t, instance, seed))
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            channel_heads,
            instance_heads,
        })
    }

    fn zero_grad(&mut self) {
        self.model.zero_grad();
        self.channel_heads.iter_mut().for_each(|h| h.zero_grad());
        self.instance_heads.iter_mut().for_each(|h| h.zero_grad());
    }

    /// Modules in optimizer order.
    pub fn modules(&mut self) -> Vec<&mut dyn Parameterized> {
        let mut v: Vec<&mut dyn Parameterized> = vec![&mut self.model];
        for h in self.channel_heads.iter_mut().chain(self.instance_heads.iter_mut()) {
            v.push(h);
        }
        v
    }
}

fn to_f64(rows: &[f32], r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_vec((r, c), rows.iter().map(|&v| v as f64).collect()).expect("row-major buffer")
}

/// Channel-wise contrast of one layer: per sample, the `C` channel rows of
/// view a and view b form a `2C`-row bank. Returns the batch mean and the
/// gradient of that mean with respect to `rows`.
fn channel_layer(rows: &[f32], batch: usize, channels: usize, dim: usize, tau: f64, plan: &TrainPlan) -> Result<(f64, Vec<f32>)> {
    let anchors = plan.contrast().anchors();
    let per_sample: Vec<Result<LossGrad>> = par::map_indexed(batch, |j| {
        let a = &rows[j * channels * dim..(j + 1) * channels * dim];
        let b = &rows[(batch + j) * channels * dim..(batch + j + 1) * channels * dim];
        let mut bank = Vec::with_capacity(2 * channels * dim);
        bank.extend_from_slice(a);
        bank.extend_from_slice(b);
        paired_contrast_grad(to_f64(&bank, 2 * channels, dim).view(), tau, anchors)
    });
    let mut grad = vec![0.0f32; rows.len()];
    let mut total = 0.0;
    let scale = match plan.cwcl_reduction {
        LayerReduction::Sum => 1.0,
        LayerReduction::Mean => 1.0 / channels as f64,
    } / batch as f64;
    for (j, g) in per_sample.into_iter().enumerate() {
        let g = g?;
        total += g.value;
        let (ga, gb) = g.grad.view().split_at(ndarray::Axis(0), channels);
        for (dst, src) in [(j, ga), (batch + j, gb)] {
            let out = &mut grad[dst * channels * dim..(dst + 1) * channels * dim];
            for (o, &v) in out.iter_mut().zip(src.iter()) {
                *o = (v * scale) as f32;
            }
        }
    }
    Ok((total * scale, grad))
}

fn supcon_layer(rows: &[f32], labels: &[usize], dim: usize, tau: f64) -> Result<(f64, Vec<f32>)> {
    let feats = to_f64(rows, 2 * labels.len(), dim);
    let g = supcon_loss_grad(feats.view(), labels, tau)?;
    Ok((g.value, g.grad.iter().map(|&v| v as f32).collect()))
}

fn logits_view(logits: &[f32], n: usize, k: usize) -> Array2<f64> {
    to_f64(logits, n, k)
}

/// One forward/backward pass. `views` holds view a of every sample followed
/// by view b; `labels` has one (noisy) label per sample. Gradients are left
/// in the parameters for the optimizer.
pub(crate) fn train_step(nets: &mut Nets, views: Vec<&Image>, labels: &[usize], plan: &TrainPlan, stage: Stage) -> Result<StepOutcome> {
    let batch = labels.len();
    if views.len() != 2 * batch || batch == 0 {
        return Err(Error::shape("training views", 2 * batch, views.len()));
    }
    nets.zero_grad();
    let x = Tensor4::from_images(views, nets.model.input_shape())?;
    let (out, tape) = nets.model.forward_train(x)?;
    let k = out.num_classes;
    let both: Vec<usize> = labels.iter().chain(labels).copied().collect();
    let logits = logits_view(&out.logits, 2 * batch, k);
    let ce = match ce_loss_grad(ArrayView2::from(&logits), &both) {
        Ok(ce) => ce,
        Err(Error::NonFinite(m)) => return Ok(StepOutcome::NonFinite(m)),
        Err(e) => return Err(e),
    };
    let correct = out
        .logits
        .chunks(k)
        .zip(&both)
        .filter(|(row, &y)| argmax(row) == y)
        .count();

    let layers = out.taps.len();
    let lambda = plan.lambda;
    let mut per_layer = vec![0.0; layers];
    let mut dtaps: Vec<Option<Tensor4>> = vec![None; layers];
    if lambda > 0.0 {
        let weight = (lambda / layers as f64) as f32;
        for (l, tap) in out.taps.iter().enumerate() {
            let head = match stage {
                Stage::Stage1 => &mut nets.channel_heads[l],
                Stage::Stage2 => &mut nets.instance_heads[l],
            };
            let (rows, cache) = head.forward_train(tap, l)?;
            let dim = head.out_dim();
            if rows.iter().any(|v| !v.is_finite()) {
                return Ok(StepOutcome::NonFinite(format!("projection rows of layer {l}")));
            }
            let result = match stage {
                Stage::Stage1 => channel_layer(&rows, batch, tap.c, dim, plan.tau_cwcl, plan),
                Stage::Stage2 => supcon_layer(&rows, labels, dim, plan.tau_supcon),
            };
            let (value, mut grad) = match result {
                Ok(r) => r,
                Err(Error::NonFinite(m)) => return Ok(StepOutcome::NonFinite(m)),
                Err(e) => return Err(e),
            };
            per_layer[l] = value;
            grad.iter_mut().for_each(|g| *g *= weight);
            dtaps[l] = Some(head.backward(&cache, &grad));
        }
    }
    let parts = match stage {
        Stage::Stage1 => stage1_total(ce.value, &per_layer, lambda)?,
        Stage::Stage2 => stage2_total(ce.value, &per_layer, lambda)?,
    };
    if !parts.total.is_finite() {
        return Ok(StepOutcome::NonFinite(format!("total loss {}", parts.total)));
    }
    let ce_weight = 1.0 - lambda;
    let dlogits: Vec<f32> = ce.grad.iter().map(|&g| (g * ce_weight) as f32).collect();
    nets.model.backward(&tape, &dlogits, &dtaps)?;
    Ok(StepOutcome::Trained(StepStats {
        parts,
        correct,
        seen: 2 * batch,
    }))
}

