//! Datasets, synthetic label noise with provenance, and two-view augmentation.

mod augment;
pub mod datasets;
mod noise;
mod overlay;

pub use augment::{AugPolicy, Augmenter, ViewPair};
pub use noise::{
    empirical_noise_rate, inject, inject_asymmetric_next, inject_asymmetric_pairs,
    inject_symmetric, InjectOptions, Injection, NoiseKind, NoiseSpec, PairMap, PairScope,
};
pub use overlay::{load_noise_file, save_noise_file, write_noise_overlay, NoiseOverlay};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Height, width and channel count of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// An H×W×C image with pixel values in `[0, 1]`, stored row-major with
/// interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: ImageShape,
    data: Vec<f32>,
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape("image buffer", shape.len(), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: ImageShape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.shape.width + x) * self.shape.channels + c]
    }

    /// Writes the pixels in channel-major (C×H×W) order into `out`.
    pub fn write_chw(&self, out: &mut [f32]) {
        let ImageShape {
            height,
            width,
            channels,
        } = self.shape;
        debug_assert_eq!(out.len(), self.data.len());
        for y in 0..height {
            for x in 0..width {
                let src = (y * width + x) * channels;
                for c in 0..channels {
                    out[(c * height + y) * width + x] = self.data[src + c];
                }
            }
        }
    }

    /// Left-right mirror.
    pub fn mirrored(&self) -> Image {
        let ImageShape {
            height,
            width,
            channels,
        } = self.shape;
        let mut data = vec![0.0; self.data.len()];
        for y in 0..height {
            for x in 0..width {
                let src = (y * width + x) * channels;
                let dst = (y * width + (width - 1 - x)) * channels;
                data[dst..dst + channels].copy_from_slice(&self.data[src..src + channels]);
            }
        }
        Image {
            shape: self.shape,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images with clean labels in `0..num_classes`.
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    shape: ImageShape,
}

impl LabeledImageSet {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape("labeled image set", images.len(), labels.len()));
        }
        if images.is_empty() {
            return Err(Error::Dataset("image set is empty".into()));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {y} at index {i} is outside 0..{num_classes}"
            )));
        }
        let shape = images[0].shape();
        if let Some((i, img)) = images.iter().enumerate().find(|(_, im)| im.shape() != shape) {
            return Err(Error::Dataset(format!(
                "image {i} has shape {} but the set uses {shape}",
                img.shape()
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image_shape(&self) -> ImageShape {
        self.shape
    }

    /// Keeps the first `n` samples.
    pub fn truncated(mut self, n: usize) -> Self {
        if n > 0 && n < self.len() {
            self.images.truncate(n);
            self.labels.truncate(n);
        }
        self
    }
}

/// A training set with corrupted labels and a record of every flip.
#[derive(Debug, Clone)]
pub struct NoisyCorpus {
    base: LabeledImageSet,
    noisy_labels: Vec<usize>,
    flip_mask: Vec<bool>,
    noise_spec: NoiseSpec,
    seed: u64,
}

impl NoisyCorpus {
    /// Corrupts `base` according to `spec`, deterministically in `seed`.
    pub fn inject(base: LabeledImageSet, spec: NoiseSpec, seed: u64) -> Result<Self> {
        let Injection { noisy, flipped } = inject(base.labels(), &spec, base.num_classes(), seed)?;
        Ok(Self {
            base,
            noisy_labels: noisy,
            flip_mask: flipped,
            noise_spec: spec,
            seed,
        })
    }

    /// Re-attaches a persisted overlay to its base set.
    pub fn from_overlay(
        base: LabeledImageSet,
        overlay: NoiseOverlay,
        spec: NoiseSpec,
        seed: u64,
    ) -> Result<Self> {
        if overlay.clean.len() != base.len() {
            return Err(Error::shape("noise overlay", base.len(), overlay.clean.len()));
        }
        if let Some(i) = (0..base.len()).find(|&i| overlay.clean[i] != base.labels()[i]) {
            return Err(Error::InvalidInput(format!(
                "overlay clean label at index {i} ({}) disagrees with dataset ({})",
                overlay.clean[i],
                base.labels()[i]
            )));
        }
        if let Some(&y) = overlay.noisy.iter().find(|&&y| y >= base.num_classes()) {
            return Err(Error::InvalidInput(format!(
                "overlay noisy label {y} outside 0..{}",
                base.num_classes()
            )));
        }
        Ok(Self {
            base,
            noisy_labels: overlay.noisy,
            flip_mask: overlay.flipped,
            noise_spec: spec,
            seed,
        })
    }

    pub fn base(&self) -> &LabeledImageSet {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    pub fn images(&self) -> &[Image] {
        self.base.images()
    }

    pub fn clean_labels(&self) -> &[usize] {
        self.base.labels()
    }

    pub fn noisy_labels(&self) -> &[usize] {
        &self.noisy_labels
    }

    pub fn flip_mask(&self) -> &[bool] {
        &self.flip_mask
    }

    pub fn noise_spec(&self) -> &NoiseSpec {
        &self.noise_spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn overlay(&self) -> NoiseOverlay {
        NoiseOverlay {
            clean: self.base.labels().to_vec(),
            noisy: self.noisy_labels.clone(),
            flipped: self.flip_mask.clone(),
        }
    }
}
