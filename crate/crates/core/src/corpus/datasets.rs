//! Dataset adapters: CIFAR binary archives, labeled image folders, and a
//! seeded synthetic generator for desk-scale experiments.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Image, ImageShape, LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn num_classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            Self::Cifar10 => 1,
            Self::Cifar100 => 2,
        }
    }

    fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (Self::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (Self::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (Self::Cifar100, Split::Train) => vec!["train.bin"],
            (Self::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }
}

/// Decodes CIFAR binary records (label byte(s) then 3072 channel-major bytes).
/// CIFAR-100 records carry `coarse, fine`; the fine label is used.
pub fn decode_cifar_records(bytes: &[u8], variant: CifarVariant) -> Result<(Vec<Image>, Vec<usize>)> {
    let record = variant.label_bytes() + CIFAR_PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Dataset(format!(
            "CIFAR archive length {} is not a positive multiple of {record}",
            bytes.len()
        )));
    }
    let shape = ImageShape::new(CIFAR_SIDE, CIFAR_SIDE, 3);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(bytes.len() / record);
    let mut labels = Vec::with_capacity(bytes.len() / record);
    for rec in bytes.chunks_exact(record) {
        let label = rec[variant.label_bytes() - 1] as usize;
        if label >= variant.num_classes() {
            return Err(Error::Dataset(format!("CIFAR label {label} out of range")));
        }
        let px = &rec[variant.label_bytes()..];
        let mut data = vec![0.0f32; CIFAR_PIXELS];
        for i in 0..plane {
            for c in 0..3 {
                data[i * 3 + c] = px[c * plane + i] as f32 / 255.0;
            }
        }
        images.push(Image::new(shape, data)?);
        labels.push(label);
    }
    Ok((images, labels))
}

/// Loads a CIFAR-10/100 binary distribution directory.
pub fn load_cifar(dir: &Path, variant: CifarVariant, split: Split) -> Result<LabeledImageSet> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in variant.files(split) {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let (im, lb) = decode_cifar_records(&bytes, variant)?;
        images.extend(im);
        labels.extend(lb);
    }
    LabeledImageSet::new(images, labels, variant.num_classes(), split)
}

/// Loads `root/<class>/<image>` trees. Classes are the sorted subdirectory
/// names. Images are converted to RGB; all must share one size unless
/// `resize` is given. Returns the set and the class names.
pub fn load_image_folder(
    root: &Path,
    split: Split,
    resize: Option<(u32, u32)>,
) -> Result<(LabeledImageSet, Vec<String>)> {
    let read_dir = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::io(format!("listing {}", p.display()), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        Ok(entries)
    };
    let class_dirs: Vec<PathBuf> = read_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("{} has no class subdirectories", root.display())));
    }
    let names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        for path in read_dir(dir)?.into_iter().filter(|p| p.is_file()) {
            let decoded = image::open(&path)
                .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            let decoded = match resize {
                Some((w, h)) => decoded.resize_exact(w, h, image::imageops::FilterType::Triangle),
                None => decoded,
            };
            let rgb = decoded.to_rgb8();
            let shape = ImageShape::new(rgb.height() as usize, rgb.width() as usize, 3);
            let data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
            images.push(Image::new(shape, data)?);
            labels.push(label);
        }
    }
    let set = LabeledImageSet::new(images, labels, names.len(), split)?;
    Ok((set, names))
}

/// Parameters of the synthetic texture dataset.
///
/// Each class owns a colored oriented grating under a Gaussian blob. A sample
/// is its class pattern, randomly shifted and phase-shifted, blended with a
/// weaker pattern from another class, plus pixel noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub side: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Maximum shift of the class pattern in pixels.
    pub max_shift: usize,
    /// Upper bound of the distractor blend weight.
    pub distractor: f32,
    pub pixel_noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            side: 16,
            train_size: 5000,
            test_size: 1000,
            max_shift: 3,
            distractor: 0.7,
            pixel_noise: 0.08,
            seed: 0,
        }
    }
}

struct ClassPattern {
    color: [f32; 3],
    freq: f32,
    cos: f32,
    sin: f32,
    center: (f32, f32),
    radius: f32,
}

impl ClassPattern {
    fn sample(seed: u64, class: usize, side: usize) -> Self {
        let mut rng = stream(seed, Purpose::Synthetic, 0, class as u64);
        let theta = rng.gen_range(0.0..PI);
        let s = side as f32;
        Self {
            color: [
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.2..1.0),
            ],
            freq: rng.gen_range(1.5..4.5) / s,
            cos: theta.cos(),
            sin: theta.sin(),
            center: (rng.gen_range(0.3 * s..0.7 * s), rng.gen_range(0.3 * s..0.7 * s)),
            radius: rng.gen_range(0.2 * s..0.35 * s),
        }
    }

    fn value(&self, y: f32, x: f32, phase: f32) -> f32 {
        let grating = (2.0 * PI * self.freq * (x * self.cos + y * self.sin) + phase).sin();
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let blob = (-(dx * dx + dy * dy) / (2.0 * self.radius * self.radius)).exp();
        0.6 * grating * (0.4 + 0.6 * blob) + 0.4 * (2.0 * blob - 1.0)
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    // Box-Muller; one draw pair per value keeps the stream layout simple.
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Generates `(train, test)` sets. Labels cycle through the classes so both
/// splits are balanced.
pub fn synthetic(spec: &SyntheticSpec) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if spec.num_classes < 2 || spec.side < 4 {
        return Err(Error::Config(format!(
            "synthetic dataset needs ≥2 classes and side ≥4, got {} / {}",
            spec.num_classes, spec.side
        )));
    }
    let patterns: Vec<ClassPattern> = (0..spec.num_classes)
        .map(|c| ClassPattern::sample(spec.seed, c, spec.side))
        .collect();
    let shape = ImageShape::new(spec.side, spec.side, 3);
    let make = |split_id: u64, n: usize, split: Split| -> Result<LabeledImageSet> {
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.num_classes;
            let mut rng = stream(spec.seed, Purpose::Synthetic, split_id, i as u64);
            let shift = spec.max_shift as f32;
            let (sy, sx) = if spec.max_shift > 0 {
                (rng.gen_range(-shift..=shift), rng.gen_range(-shift..=shift))
            } else {
                (0.0, 0.0)
            };
            let phase = rng.gen_range(0.0..2.0 * PI);
            let contrast = rng.gen_range(0.6..1.0f32);
            let other = (class + rng.gen_range(1..spec.num_classes)) % spec.num_classes;
            let weight = rng.gen_range(0.0..=spec.distractor.max(0.0));
            let other_phase = rng.gen_range(0.0..2.0 * PI);
            let (p, q) = (&patterns[class], &patterns[other]);
            let mut data = vec![0.0f32; shape.len()];
            for y in 0..spec.side {
                for x in 0..spec.side {
                    let (yf, xf) = (y as f32 - sy, x as f32 - sx);
                    let v = contrast * p.value(yf, xf, phase);
                    let w = weight * q.value(y as f32, x as f32, other_phase);
                    for c in 0..3 {
                        let mixed = (v * p.color[c] + w * q.color[c]) / (1.0 + weight);
                        let noise = spec.pixel_noise * standard_normal(&mut rng);
                        data[(y * spec.side + x) * 3 + c] = (0.5 + 0.5 * mixed + noise).clamp(0.0, 1.0);
                    }
                }
            }
            images.push(Image::new(shape, data)?);
            labels.push(class);
        }
        LabeledImageSet::new(images, labels, spec.num_classes, split)
    };
    Ok((make(1, spec.train_size, Split::Train)?, make(2, spec.test_size, Split::Test)?))
}
