//! Loss kernels with analytic gradients.
//!
//! Inputs are row-major `ArrayView2<f64>` with one vector per row. Similarity
//! is cosine similarity, so every contrastive loss normalizes its rows first
//! and back-propagates through that normalization.
//!
//! Paired contrast (instance-wise and channel-wise) uses `2P` rows where rows
//! `i` and `i + P` are the two views of the same instance or channel. For an
//! anchor `i` with positive `p`:
//!
//! ```text
//! ℓ_i = −log( exp(s_ip/τ) / Σ_{k≠i} exp(s_ik/τ) )
//! ```
//!
//! The denominator runs over every other row, the positive included, so each
//! term is ≥ 0. By default only the first view anchors (`i < P`) and the terms
//! are summed.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperatures and anchoring for the contrastive terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau_cwcl: f64,
    pub tau_supcon: f64,
    /// Also anchor the second view and halve the sum.
    pub symmetrize: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau_cwcl: 0.5,
            tau_supcon: 0.1,
            symmetrize: false,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_cwcl", self.tau_cwcl), ("tau_supcon", self.tau_supcon)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive finite temperature, got {t}")));
            }
        }
        Ok(())
    }

    pub fn anchors(&self) -> Anchors {
        if self.symmetrize {
            Anchors::Both
        } else {
            Anchors::First
        }
    }
}

/// Which rows act as anchors in paired contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchors {
    /// Rows `0..P`, summed.
    First,
    /// All `2P` rows, summed and halved.
    Both,
}

/// A loss value with its gradient with respect to the input rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity. Zero vectors are an error.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine_sim_grad(a, b)?.0)
}

/// Cosine similarity and its gradients with respect to `a` and `b`.
pub fn cosine_sim_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine similarity", a.len(), b.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cosine similarity input".into()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    let ga = a.iter().zip(b).map(|(x, y)| y / (na * nb) - cos * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x / (na * nb) - cos * y / (nb * nb)).collect();
    Ok((cos, ga, gb))
}

/// Unit rows and the original norms.
fn normalize_rows(z: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("contrastive loss input".into()));
    }
    let norms: Array1<f64> = z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::InvalidInput(format!("row {i} is a zero vector")));
    }
    let u = &z / &norms.view().insert_axis(Axis(1));
    Ok((u, norms))
}

/// Back-propagates `dU` (gradient on unit rows) to the raw rows.
fn through_normalization(u: &Array2<f64>, norms: &Array1<f64>, du: Array2<f64>) -> Array2<f64> {
    let mut dz = du;
    for ((mut g, ur), &n) in dz.rows_mut().into_iter().zip(u.rows()).zip(norms) {
        let radial = g.dot(&ur);
        g.zip_mut_with(&ur, |gv, &uv| *gv = (*gv - radial * uv) / n);
    }
    dz
}

/// Logsumexp of row `i` of `s` over `k ≠ i`, and the matching softmax.
fn softmax_excluding_self(s: &Array2<f64>, i: usize) -> (f64, Vec<f64>) {
    let row = s.row(i);
    let max = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(k, &v)| if k == i { 0.0 } else { (v - max).exp() })
        .collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    (max + sum.ln(), probs)
}

fn similarity(u: &Array2<f64>, tau: f64) -> Array2<f64> {
    u.dot(&u.t()) / tau
}

fn paired_setup(z: ArrayView2<f64>, tau: f64) -> Result<usize> {
    check_tau(tau)?;
    let rows = z.nrows();
    if rows == 0 || rows % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "paired contrast needs 2P rows with P ≥ 1, got {rows}"
        )));
    }
    if z.ncols() == 0 {
        return Err(Error::InvalidInput("paired contrast needs vectors of length ≥ 1".into()));
    }
    Ok(rows / 2)
}

fn anchor_list(p: usize, anchors: Anchors) -> (Vec<usize>, f64) {
    match anchors {
        Anchors::First => ((0..p).collect(), 1.0),
        Anchors::Both => ((0..2 * p).collect(), 0.5),
    }
}

/// Per-anchor terms `ℓ_i` of paired contrast, in anchor order.
pub fn paired_terms(z: ArrayView2<f64>, tau: f64, anchors: Anchors) -> Result<Vec<f64>> {
    let p = paired_setup(z, tau)?;
    let (u, _) = normalize_rows(z)?;
    let s = similarity(&u, tau);
    let (list, _) = anchor_list(p, anchors);
    Ok(list
        .into_iter()
        .map(|i| {
            let (lse, _) = softmax_excluding_self(&s, i);
            lse - s[[i, (i + p) % (2 * p)]]
        })
        .collect())
}

/// Paired contrast value and gradient.
pub fn paired_contrast_grad(z: ArrayView2<f64>, tau: f64, anchors: Anchors) -> Result<LossGrad> {
    let p = paired_setup(z, tau)?;
    let n = 2 * p;
    let (u, norms) = normalize_rows(z)?;
    let s = similarity(&u, tau);
    let (list, weight) = anchor_list(p, anchors);
    let mut value = 0.0;
    let mut ds = Array2::<f64>::zeros((n, n));
    for i in list {
        let pos = (i + p) % n;
        let (lse, probs) = softmax_excluding_self(&s, i);
        value += lse - s[[i, pos]];
        for (k, pk) in probs.into_iter().enumerate() {
            ds[[i, k]] += weight * pk;
        }
        ds[[i, pos]] -= weight;
    }
    let du = (&ds + &ds.t()).dot(&u) / tau;
    Ok(LossGrad {
        value: weight * value,
        grad: through_normalization(&u, &norms, du),
    })
}

pub fn paired_contrast(z: ArrayView2<f64>, tau: f64, anchors: Anchors) -> Result<f64> {
    let terms = paired_terms(z, tau, anchors)?;
    let weight = if anchors == Anchors::Both { 0.5 } else { 1.0 };
    Ok(weight * terms.iter().sum::<f64>())
}

/// Instance-wise InfoNCE over `2N` instance vectors (rows `i`, `i + N` are
/// views of one image), first-view anchors.
pub fn iwcl_loss(z: ArrayView2<f64>, tau: f64) -> Result<f64> {
    paired_contrast(z, tau, Anchors::First)
}

pub fn iwcl_loss_grad(z: ArrayView2<f64>, tau: f64, anchors: Anchors) -> Result<LossGrad> {
    paired_contrast_grad(z, tau, anchors)
}

/// Channel-wise contrast for one sample: `2M` channel vectors where rows
/// `i`, `i + M` are the same channel index under the two views. Channels of
/// other samples never enter the denominator.
pub fn cwcl_loss(c: ArrayView2<f64>, tau: f64) -> Result<f64> {
    paired_contrast(c, tau, Anchors::First)
}

pub fn cwcl_loss_grad(c: ArrayView2<f64>, tau: f64, anchors: Anchors) -> Result<LossGrad> {
    paired_contrast_grad(c, tau, anchors)
}

/// Mean of per-sample channel-wise losses.
pub fn cwcl_loss_batch(banks: &[ArrayView2<f64>], tau: f64, anchors: Anchors) -> Result<f64> {
    if banks.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut total = 0.0;
    for b in banks {
        total += paired_contrast(*b, tau, anchors)?;
    }
    Ok(total / banks.len() as f64)
}

fn supcon_row_labels(rows: usize, labels: &[usize]) -> Result<Vec<usize>> {
    if labels.is_empty() || rows != 2 * labels.len() {
        return Err(Error::shape("supcon features", 2 * labels.len(), rows));
    }
    Ok(labels.iter().chain(labels).copied().collect())
}

/// Supervised contrastive loss over a two-view batch: `features` has `2B`
/// rows (rows `i` and `i + B` are views of sample `i`), `labels` has `B`
/// entries. Each anchor averages `−log softmax` over its same-label rows
/// (self excluded); the loss is the mean over all `2B` anchors.
pub fn supcon_loss(features: ArrayView2<f64>, labels: &[usize], tau: f64) -> Result<f64> {
    let row_labels = supcon_row_labels(features.nrows(), labels)?;
    Ok(supcon_rows_grad(features, &row_labels, tau, false)?.value)
}

pub fn supcon_loss_grad(features: ArrayView2<f64>, labels: &[usize], tau: f64) -> Result<LossGrad> {
    let row_labels = supcon_row_labels(features.nrows(), labels)?;
    supcon_rows_grad(features, &row_labels, tau, true)
}

/// Supervised contrast with one label per row. An anchor without any
/// positive is an error.
pub fn supcon_loss_rows(features: ArrayView2<f64>, row_labels: &[usize], tau: f64) -> Result<LossGrad> {
    supcon_rows_grad(features, row_labels, tau, true)
}

/// Per-anchor supervised contrastive terms.
pub fn supcon_terms(features: ArrayView2<f64>, row_labels: &[usize], tau: f64) -> Result<Vec<f64>> {
    let (terms, _) = supcon_core(features, row_labels, tau, false)?;
    Ok(terms)
}

fn supcon_core(
    features: ArrayView2<f64>,
    row_labels: &[usize],
    tau: f64,
    want_grad: bool,
) -> Result<(Vec<f64>, Option<Array2<f64>>)> {
    check_tau(tau)?;
    let n = features.nrows();
    if n < 2 || row_labels.len() != n {
        return Err(Error::shape("supcon rows", format!("{n} labels, n ≥ 2"), row_labels.len()));
    }
    let (u, norms) = normalize_rows(features)?;
    let s = similarity(&u, tau);
    let mut terms = Vec::with_capacity(n);
    let mut ds = want_grad.then(|| Array2::<f64>::zeros((n, n)));
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&k| k != i && row_labels[k] == row_labels[i]).collect();
        if positives.is_empty() {
            return Err(Error::InvalidInput(format!("anchor {i} has no positive")));
        }
        let (lse, probs) = softmax_excluding_self(&s, i);
        let inv = 1.0 / positives.len() as f64;
        terms.push(positives.iter().map(|&k| lse - s[[i, k]]).sum::<f64>() * inv);
        if let Some(ds) = ds.as_mut() {
            let w = 1.0 / n as f64;
            for (k, pk) in probs.into_iter().enumerate() {
                ds[[i, k]] += w * pk;
            }
            for &k in &positives {
                ds[[i, k]] -= w * inv;
            }
        }
    }
    let grad = ds.map(|ds| {
        let du = (&ds + &ds.t()).dot(&u) / tau;
        through_normalization(&u, &norms, du)
    });
    Ok((terms, grad))
}

fn supcon_rows_grad(
    features: ArrayView2<f64>,
    row_labels: &[usize],
    tau: f64,
    want_grad: bool,
) -> Result<LossGrad> {
    let n = features.nrows();
    let (terms, grad) = supcon_core(features, row_labels, tau, want_grad)?;
    Ok(LossGrad {
        value: terms.iter().sum::<f64>() / n as f64,
        grad: grad.unwrap_or_else(|| Array2::zeros((0, 0))),
    })
}

/// Mean cross-entropy of `logits` (`B × K`) against `labels`.
pub fn ce_loss(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    Ok(ce_loss_grad(logits, labels)?.value)
}

pub fn ce_loss_grad(logits: ArrayView2<f64>, labels: &[usize]) -> Result<LossGrad> {
    let (b, k) = logits.dim();
    if b == 0 || labels.len() != b {
        return Err(Error::shape("cross-entropy labels", b, labels.len()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidInput(format!("label {y} is outside 0..{k}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros((b, k));
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        value += lse - row[labels[i]];
        for (j, &v) in row.iter().enumerate() {
            grad[[i, j]] = ((v - lse).exp() - f64::from(j == labels[i])) / b as f64;
        }
    }
    Ok(LossGrad {
        value: value / b as f64,
        grad,
    })
}

/// Components of a stage objective
/// `total = (1 − λ)·CE + (λ/L)·Σ_l contrastive_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLossParts {
    pub ce: f64,
    pub contrastive_per_layer: Vec<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl StageLossParts {
    /// Weight applied to each layer's contrastive term.
    pub fn layer_weight(&self) -> f64 {
        self.lambda / self.contrastive_per_layer.len() as f64
    }

    pub fn contrastive_mean(&self) -> f64 {
        self.contrastive_per_layer.iter().sum::<f64>() / self.contrastive_per_layer.len() as f64
    }

    pub fn recombine(&self) -> f64 {
        combine(self.ce, &self.contrastive_per_layer, self.lambda)
    }
}

fn combine(ce: f64, per_layer: &[f64], lambda: f64) -> f64 {
    (1.0 - lambda) * ce + (lambda / per_layer.len() as f64) * per_layer.iter().sum::<f64>()
}

fn stage_total(ce: f64, per_layer: &[f64], lambda: f64) -> Result<StageLossParts> {
    if per_layer.is_empty() {
        return Err(Error::InvalidInput("stage loss needs at least one layer term".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("λ = {lambda} is outside [0, 1]")));
    }
    Ok(StageLossParts {
        ce,
        contrastive_per_layer: per_layer.to_vec(),
        lambda,
        total: combine(ce, per_layer, lambda),
    })
}

/// Stage-one objective: cross-entropy plus per-layer channel-wise contrast.
pub fn stage1_total(ce: f64, cwcl_per_layer: &[f64], lambda: f64) -> Result<StageLossParts> {
    stage_total(ce, cwcl_per_layer, lambda)
}

/// Stage-two objective: cross-entropy plus per-layer supervised contrast.
pub fn stage2_total(ce: f64, supcon_per_layer: &[f64], lambda: f64) -> Result<StageLossParts> {
    stage_total(ce, supcon_per_layer, lambda)
}
