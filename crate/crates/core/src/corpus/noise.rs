//! Synthetic label corruption.
//!
//! Which indices get corrupted is decided by a single sequential stream
//! `(seed, Noise, 0, 0)`; the replacement class for a symmetric flip comes from
//! the per-index stream `(seed, Noise, 1, index)`.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NoisyCorpus;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Flip to a uniformly drawn class.
    Symmetric,
    /// Flip along a fixed source → target map (CIFAR-10 style).
    AsymmetricPairs,
    /// Flip to `(label + 1) mod K` (CIFAR-100 style).
    AsymmetricNext,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "symmetric" | "sym" => Ok(Self::Symmetric),
            "asymmetric_pairs" | "pairs" | "asym" => Ok(Self::AsymmetricPairs),
            "asymmetric_next" | "next" => Ok(Self::AsymmetricNext),
            other => Err(Error::InvalidSpec(format!("unknown noise kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Symmetric => "symmetric",
            Self::AsymmetricPairs => "asymmetric_pairs",
            Self::AsymmetricNext => "asymmetric_next",
        })
    }
}

/// Which samples are eligible for the corruption draw under pair noise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairScope {
    /// Only samples of mapped source classes are drawn; each flips with
    /// probability `rate` (exact-count mode: `⌊rate·n_mapped⌋` of them).
    #[default]
    PerClass,
    /// Every sample is drawn; drawn samples of unmapped classes stay put
    /// (exact-count mode: `⌊rate·n⌋` draws over the whole set).
    Global,
}

/// Source → target class map for pair noise. Serialized as a list of
/// `[source, target]` pairs so text formats need no integer keys.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct PairMap(BTreeMap<usize, usize>);

impl TryFrom<Vec<(usize, usize)>> for PairMap {
    type Error = Error;

    fn try_from(pairs: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(pairs)
    }
}

impl From<PairMap> for Vec<(usize, usize)> {
    fn from(map: PairMap) -> Self {
        map.0.into_iter().collect()
    }
}

impl PairMap {
    pub const AIRPLANE: usize = 0;
    pub const AUTOMOBILE: usize = 1;
    pub const BIRD: usize = 2;
    pub const CAT: usize = 3;
    pub const DEER: usize = 4;
    pub const DOG: usize = 5;
    pub const HORSE: usize = 7;
    pub const TRUCK: usize = 9;

    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (src, dst) in pairs {
            if src == dst {
                return Err(Error::InvalidSpec(format!("pair map has self-loop {src}→{src}")));
            }
            if map.insert(src, dst).is_some() {
                return Err(Error::InvalidSpec(format!("pair map lists source {src} twice")));
            }
        }
        Ok(Self(map))
    }

    /// TRUCK→AUTOMOBILE, BIRD→AIRPLANE, DEER→HORSE, CAT↔DOG.
    pub fn cifar10() -> Self {
        Self::new([
            (Self::TRUCK, Self::AUTOMOBILE),
            (Self::BIRD, Self::AIRPLANE),
            (Self::DEER, Self::HORSE),
            (Self::CAT, Self::DOG),
            (Self::DOG, Self::CAT),
        ])
        .expect("static map is valid")
    }

    pub fn target(&self, class: usize) -> Option<usize> {
        self.0.get(&class).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().map(|(&s, &t)| (s, t))
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (s, t) in self.iter() {
            if s == t {
                return Err(Error::InvalidSpec(format!("pair map has self-loop {s}→{s}")));
            }
            if s >= num_classes || t >= num_classes {
                return Err(Error::InvalidSpec(format!(
                    "pair {s}→{t} references a class outside 0..{num_classes}"
                )));
            }
        }
        Ok(())
    }
}

/// Knobs that change which samples are corrupted and how.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InjectOptions {
    /// Symmetric noise draws the replacement from all K classes (a draw may
    /// land on the original label, which then does not count as a flip).
    #[serde(default)]
    pub include_self: bool,
    /// Corrupt exactly `⌊rate·n⌋` eligible samples instead of independent
    /// Bernoulli draws.
    #[serde(default)]
    pub exact_count: bool,
    #[serde(default)]
    pub pair_scope: PairScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_map: Option<PairMap>,
    #[serde(default)]
    pub options: InjectOptions,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64) -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            rate,
            pair_map: None,
            options: InjectOptions::default(),
        }
    }

    pub fn asymmetric_pairs(rate: f64, pair_map: PairMap) -> Self {
        Self {
            kind: NoiseKind::AsymmetricPairs,
            rate,
            pair_map: Some(pair_map),
            options: InjectOptions::default(),
        }
    }

    pub fn asymmetric_next(rate: f64) -> Self {
        Self {
            kind: NoiseKind::AsymmetricNext,
            rate,
            pair_map: None,
            options: InjectOptions::default(),
        }
    }

    pub fn with_options(mut self, options: InjectOptions) -> Self {
        self.options = options;
        self
    }

    /// Pair map in effect: the explicit one or the CIFAR-10 default.
    pub fn effective_pair_map(&self) -> PairMap {
        self.pair_map.clone().unwrap_or_else(PairMap::cifar10)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        check_rate(self.rate)?;
        match self.kind {
            NoiseKind::Symmetric | NoiseKind::AsymmetricNext => check_classes(num_classes),
            NoiseKind::AsymmetricPairs => self.effective_pair_map().validate(num_classes),
        }
    }
}

/// Corrupted labels plus the provenance mask (`flipped[i] ⇔ noisy[i] ≠ clean[i]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    pub noisy: Vec<usize>,
    pub flipped: Vec<bool>,
}

impl Injection {
    pub fn flip_count(&self) -> usize {
        self.flipped.iter().filter(|&&f| f).count()
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidSpec(format!("noise rate {rate} is outside [0, 1]")));
    }
    Ok(())
}

fn check_classes(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidSpec(format!("need at least 2 classes, got {k}")));
    }
    Ok(())
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().position(|&y| y >= k) {
        Some(i) => Err(Error::InvalidInput(format!(
            "label {} at index {i} is outside 0..{k}",
            labels[i]
        ))),
        None => Ok(()),
    }
}

/// Picks which of `eligible` get corrupted.
fn choose(eligible: &[usize], rate: f64, seed: u64, exact_count: bool) -> Vec<usize> {
    let mut rng = stream(seed, Purpose::Noise, 0, 0);
    if exact_count {
        // Guard against 0.3 * 10 = 2.9999999999999996.
        let amount = ((rate * eligible.len() as f64) + 1e-9).floor() as usize;
        let mut picked: Vec<usize> = index::sample(&mut rng, eligible.len(), amount.min(eligible.len()))
            .into_iter()
            .map(|j| eligible[j])
            .collect();
        picked.sort_unstable();
        picked
    } else {
        eligible
            .iter()
            .copied()
            .filter(|_| rng.gen::<f64>() < rate)
            .collect()
    }
}

fn apply(labels: &[usize], picked: &[usize], mut relabel: impl FnMut(usize, usize) -> usize) -> Injection {
    let mut noisy = labels.to_vec();
    for &i in picked {
        noisy[i] = relabel(i, labels[i]);
    }
    let flipped = noisy.iter().zip(labels).map(|(a, b)| a != b).collect();
    Injection { noisy, flipped }
}

/// Symmetric noise. By default a corrupted label moves to one of the other
/// `K − 1` classes chosen uniformly.
pub fn inject_symmetric(
    labels: &[usize],
    rate: f64,
    num_classes: usize,
    seed: u64,
    options: InjectOptions,
) -> Result<Injection> {
    check_rate(rate)?;
    check_classes(num_classes)?;
    check_labels(labels, num_classes)?;
    let all: Vec<usize> = (0..labels.len()).collect();
    let picked = choose(&all, rate, seed, options.exact_count);
    Ok(apply(labels, &picked, |i, y| {
        let mut rng = stream(seed, Purpose::Noise, 1, i as u64);
        if options.include_self {
            rng.gen_range(0..num_classes)
        } else {
            let r = rng.gen_range(0..num_classes - 1);
            if r >= y {
                r + 1
            } else {
                r
            }
        }
    }))
}

/// Pair noise: a drawn sample whose class is a source in `pair_map` moves to
/// its mapped target. Classes not in the map never change.
pub fn inject_asymmetric_pairs(
    labels: &[usize],
    rate: f64,
    pair_map: &PairMap,
    num_classes: usize,
    seed: u64,
    options: InjectOptions,
) -> Result<Injection> {
    check_rate(rate)?;
    pair_map.validate(num_classes)?;
    check_labels(labels, num_classes)?;
    let eligible: Vec<usize> = match options.pair_scope {
        PairScope::PerClass => (0..labels.len())
            .filter(|&i| pair_map.target(labels[i]).is_some())
            .collect(),
        PairScope::Global => (0..labels.len()).collect(),
    };
    let picked = choose(&eligible, rate, seed, options.exact_count);
    Ok(apply(labels, &picked, |_, y| pair_map.target(y).unwrap_or(y)))
}

/// Next-class noise: a drawn label `y` becomes `(y + 1) mod K`.
pub fn inject_asymmetric_next(
    labels: &[usize],
    rate: f64,
    num_classes: usize,
    seed: u64,
    options: InjectOptions,
) -> Result<Injection> {
    check_rate(rate)?;
    check_classes(num_classes)?;
    check_labels(labels, num_classes)?;
    let all: Vec<usize> = (0..labels.len()).collect();
    let picked = choose(&all, rate, seed, options.exact_count);
    Ok(apply(labels, &picked, |_, y| (y + 1) % num_classes))
}

/// Dispatches on `spec.kind`.
pub fn inject(labels: &[usize], spec: &NoiseSpec, num_classes: usize, seed: u64) -> Result<Injection> {
    spec.validate(num_classes)?;
    match spec.kind {
        NoiseKind::Symmetric => inject_symmetric(labels, spec.rate, num_classes, seed, spec.options),
        NoiseKind::AsymmetricPairs => inject_asymmetric_pairs(
            labels,
            spec.rate,
            &spec.effective_pair_map(),
            num_classes,
            seed,
            spec.options,
        ),
        NoiseKind::AsymmetricNext => {
            inject_asymmetric_next(labels, spec.rate, num_classes, seed, spec.options)
        }
    }
}

/// Fraction of corrupted labels.
pub fn empirical_noise_rate(corpus: &NoisyCorpus) -> Result<f64> {
    mask_rate(corpus.flip_mask())
}

pub(crate) fn mask_rate(mask: &[bool]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::InvalidInput("noise rate of an empty corpus".into()));
    }
    Ok(mask.iter().filter(|&&f| f).count() as f64 / mask.len() as f64)
}
