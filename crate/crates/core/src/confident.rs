//! Confident-sample selection and class-balanced sampling.
//!
//! A sample is confident when the probability of its assigned (noisy) label,
//! averaged over two augmented views, reaches the threshold γ.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Augmenter, Image, NoisyCorpus};
use crate::error::{Error, Result};
use crate::nn::TappedBackbone;
use crate::rng::{stream, Purpose};

/// Anything that maps a batch of images to logits.
pub trait Predictor: Sync {
    fn num_classes(&self) -> usize;
    /// Row-major `images.len() × num_classes` logits.
    fn logits(&self, images: &[Image]) -> Result<Vec<f32>>;
}

impl Predictor for TappedBackbone {
    fn num_classes(&self) -> usize {
        TappedBackbone::num_classes(self)
    }

    fn logits(&self, images: &[Image]) -> Result<Vec<f32>> {
        Ok(self.forward_images(images)?.logits)
    }
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[f32]) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let mut p: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    Ok(p)
}

fn average(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Softmax of two augmented views, averaged elementwise.
pub fn predict_averaged<P, R>(model: &P, image: &Image, augmenter: &Augmenter, rng: &mut R) -> Result<Vec<f64>>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    let pair = augmenter.view_pair(image, 0, rng)?;
    let k = model.num_classes();
    let logits = model.logits(&[pair.view_a, pair.view_b])?;
    Ok(average(&softmax(&logits[..k])?, &softmax(&logits[k..2 * k])?))
}

/// Averaged probabilities for every corpus image. Sample `i` draws its views
/// from the substream `(seed, round, i)`, so results do not depend on
/// batching.
pub fn predict_corpus<P: Predictor + ?Sized>(
    model: &P,
    images: &[Image],
    augmenter: &Augmenter,
    seed: u64,
    round: u64,
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let k = model.num_classes();
    let mut out = Vec::with_capacity(images.len());
    for (c, block) in images.chunks(chunk.max(1)).enumerate() {
        let base = c * chunk.max(1);
        let mut views = Vec::with_capacity(2 * block.len());
        let mut second = Vec::with_capacity(block.len());
        for (j, img) in block.iter().enumerate() {
            let mut rng = stream(seed, Purpose::Select, round, (base + j) as u64);
            let pair = augmenter.view_pair(img, base + j, &mut rng)?;
            views.push(pair.view_a);
            second.push(pair.view_b);
        }
        views.extend(second);
        let logits = model.logits(&views)?;
        let n = block.len();
        for j in 0..n {
            let a = softmax(&logits[j * k..(j + 1) * k])?;
            let b = softmax(&logits[(n + j) * k..(n + j + 1) * k])?;
            out.push(average(&a, &b));
        }
    }
    Ok(out)
}

/// How confident samples are picked from their scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SelectionMode {
    /// Score ≥ γ.
    Threshold,
    /// Per noisy class, the top `fraction` of samples by score.
    Quantile { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub gamma: f64,
    pub mode: SelectionMode,
    pub seed: u64,
    /// Images per forward pass.
    pub chunk: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            mode: SelectionMode::Threshold,
            seed: 0,
            chunk: 256,
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("γ = {} is outside (0, 1]", self.gamma)));
        }
        if let SelectionMode::Quantile { fraction } = self.mode {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Config(format!("quantile fraction {fraction} is outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Selected corpus indices with the score of their assigned label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidentSet {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub round: u64,
    /// Lower bound on every score. In quantile mode this is the smallest
    /// selected score.
    pub threshold: f64,
}

impl ConfidentSet {
    pub fn empty(round: u64, threshold: f64) -> Self {
        Self {
            indices: Vec::new(),
            scores: Vec::new(),
            round,
            threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Checks ordering, bounds and the score floor.
    pub fn validate(&self, corpus_len: usize) -> Result<()> {
        if self.indices.len() != self.scores.len() {
            return Err(Error::shape("selection scores", self.indices.len(), self.scores.len()));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("selection indices are not strictly increasing".into()));
        }
        if let Some(&i) = self.indices.last().filter(|&&i| i >= corpus_len) {
            return Err(Error::InvalidInput(format!("selection index {i} is outside 0..{corpus_len}")));
        }
        if let Some(s) = self.scores.iter().find(|&&s| !(s >= self.threshold)) {
            return Err(Error::InvalidInput(format!("score {s} is below threshold {}", self.threshold)));
        }
        Ok(())
    }

    /// Same members, relabelled as `round`.
    pub fn reused_for(&self, round: u64) -> Self {
        Self { round, ..self.clone() }
    }
}

/// Applies the selection rule to precomputed scores (probability of each
/// sample's assigned label).
pub fn select_from_scores(
    scores: &[f64],
    labels: &[usize],
    config: &SelectConfig,
    round: u64,
) -> Result<ConfidentSet> {
    config.validate()?;
    if scores.len() != labels.len() {
        return Err(Error::shape("selection labels", scores.len(), labels.len()));
    }
    let keep: Vec<usize> = match config.mode {
        SelectionMode::Threshold => (0..scores.len()).filter(|&i| scores[i] >= config.gamma).collect(),
        SelectionMode::Quantile { fraction } => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &y) in labels.iter().enumerate() {
                by_class.entry(y).or_default().push(i);
            }
            let mut keep = Vec::new();
            for members in by_class.values_mut() {
                members.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                let take = ((members.len() as f64 * fraction).ceil() as usize).min(members.len());
                keep.extend_from_slice(&members[..take]);
            }
            keep.sort_unstable();
            keep
        }
    };
    let picked: Vec<f64> = keep.iter().map(|&i| scores[i]).collect();
    let threshold = match config.mode {
        SelectionMode::Threshold => config.gamma,
        SelectionMode::Quantile { .. } => picked.iter().copied().fold(f64::INFINITY, f64::min).min(1.0),
    };
    Ok(ConfidentSet {
        indices: keep,
        scores: picked,
        round,
        threshold,
    })
}

/// Scores every corpus sample against its noisy label and selects. An empty
/// result is returned as an empty set; the caller decides the fallback.
pub fn select_confident<P: Predictor + ?Sized>(
    model: &P,
    corpus: &NoisyCorpus,
    augmenter: &Augmenter,
    config: &SelectConfig,
    round: u64,
) -> Result<ConfidentSet> {
    config.validate()?;
    let probs = predict_corpus(model, corpus.images(), augmenter, config.seed, round, config.chunk)?;
    let scores: Vec<f64> = probs
        .iter()
        .zip(corpus.noisy_labels())
        .map(|(p, &y)| p[y])
        .collect();
    select_from_scores(&scores, corpus.noisy_labels(), config, round)
}

/// Fraction of selected indices whose label was corrupted.
pub fn selection_noise_rate(selection: &ConfidentSet, flip_mask: &[bool]) -> Result<f64> {
    if selection.is_empty() {
        return Err(Error::InvalidInput("noise rate of an empty selection".into()));
    }
    let mut flipped = 0usize;
    for &i in &selection.indices {
        match flip_mask.get(i) {
            Some(true) => flipped += 1,
            Some(false) => {}
            None => return Err(Error::InvalidInput(format!("selection index {i} is outside the flip mask"))),
        }
    }
    Ok(flipped as f64 / selection.len() as f64)
}

/// Draws a class uniformly among the classes present in the selection, then
/// a uniform member of that class, with replacement.
#[derive(Debug, Clone)]
pub struct ClassBalancedSampler {
    classes: Vec<(usize, Vec<usize>)>,
}

impl ClassBalancedSampler {
    pub fn new(selection: &ConfidentSet, labels: &[usize]) -> Result<Self> {
        if selection.is_empty() {
            return Err(Error::InvalidInput("class-balanced sampling needs a non-empty selection".into()));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &selection.indices {
            let y = *labels
                .get(i)
                .ok_or_else(|| Error::InvalidInput(format!("selection index {i} has no label")))?;
            by_class.entry(y).or_default().push(i);
        }
        Ok(Self {
            classes: by_class.into_iter().collect(),
        })
    }

    /// Represented classes in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        self.classes.iter().map(|(c, _)| *c).collect()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let (_, members) = &self.classes[rng.gen_range(0..self.classes.len())];
        members[rng.gen_range(0..members.len())]
    }

    pub fn batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        Ok((0..batch_size).map(|_| self.draw(rng)).collect())
    }
}

/// `num_batches` class-balanced batches of exactly `batch_size` indices.
pub fn class_balanced_batches<R: Rng + ?Sized>(
    selection: &ConfidentSet,
    labels: &[usize],
    batch_size: usize,
    num_batches: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let sampler = ClassBalancedSampler::new(selection, labels)?;
    (0..num_batches).map(|_| sampler.batch(batch_size, rng)).collect()
}

#[derive(Serialize, Deserialize)]
struct SelectionRow {
    index: usize,
    score: f64,
}

/// Writes the selection as CSV with header `index,score`.
pub fn write_selection(path: &Path, selection: &ConfidentSet) -> Result<()> {
    let ctx = || format!("writing selection {}", path.display());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(ctx(), e.into()))?;
    if selection.is_empty() {
        w.write_record(["index", "score"]).map_err(|e| Error::io(ctx(), e.into()))?;
    }
    for (&index, &score) in selection.indices.iter().zip(&selection.scores) {
        w.serialize(SelectionRow { index, score }).map_err(|e| Error::io(ctx(), e.into()))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// Reads a selection file. `threshold` is the γ it was selected with.
pub fn read_selection(path: &Path, round: u64, threshold: f64) -> Result<ConfidentSet> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(format!("reading {}", path.display()), e.into()))?;
    let headers = r.headers().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        row: 1,
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != ["index", "score"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            message: "expected header index,score".into(),
        });
    }
    let mut set = ConfidentSet::empty(round, threshold);
    for (row, rec) in r.deserialize::<SelectionRow>().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: row + 2,
            message: e.to_string(),
        })?;
        set.indices.push(rec.index);
        set.scores.push(rec.score);
    }
    Ok(set)
}
