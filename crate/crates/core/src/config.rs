//! Experiment configuration: one TOML file fully determines a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::datasets::{load_cifar, load_image_folder, synthetic, CifarVariant, SyntheticSpec};
use crate::corpus::{LabeledImageSet, NoiseSpec, Split};
use crate::error::{Error, Result};
use crate::nn::BackboneSpec;
use crate::trainer::TrainPlan;

/// Where training and test images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default)]
        num_classes: Option<usize>,
        #[serde(default)]
        side: Option<usize>,
        #[serde(default)]
        train_size: Option<usize>,
        #[serde(default)]
        test_size: Option<usize>,
        #[serde(default)]
        data_seed: Option<u64>,
    },
    /// Binary CIFAR-10 batches in `path`.
    Cifar10 { path: PathBuf },
    Cifar100 { path: PathBuf },
    /// `path/train/<class>/*` and `path/test/<class>/*`.
    ImageFolder {
        path: PathBuf,
        #[serde(default)]
        resize: Option<[u32; 2]>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::Synthetic {
            num_classes: None,
            side: None,
            train_size: None,
            test_size: None,
            data_seed: None,
        }
    }
}

impl DatasetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Synthetic { .. } => "synthetic",
            Self::Cifar10 { .. } => "cifar10",
            Self::Cifar100 { .. } => "cifar100",
            Self::ImageFolder { .. } => "image_folder",
        }
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match *self {
            Self::Synthetic {
                num_classes,
                side,
                train_size,
                test_size,
                data_seed,
            } => {
                let d = SyntheticSpec::default();
                Some(SyntheticSpec {
                    num_classes: num_classes.unwrap_or(d.num_classes),
                    side: side.unwrap_or(d.side),
                    train_size: train_size.unwrap_or(d.train_size),
                    test_size: test_size.unwrap_or(d.test_size),
                    seed: data_seed.unwrap_or(d.seed),
                    ..d
                })
            }
            _ => None,
        }
    }

    /// Loads `(train, test)`. Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        match self {
            Self::Synthetic { .. } => synthetic(&self.synthetic_spec().expect("synthetic variant")),
            Self::Cifar10 { path } | Self::Cifar100 { path } => {
                let variant = if matches!(self, Self::Cifar10 { .. }) {
                    CifarVariant::Cifar10
                } else {
                    CifarVariant::Cifar100
                };
                let dir = resolve(path);
                Ok((load_cifar(&dir, variant, Split::Train)?, load_cifar(&dir, variant, Split::Test)?))
            }
            Self::ImageFolder { path, resize } => {
                let dir = resolve(path);
                let resize = resize.map(|[w, h]| (w, h));
                let (train, names) = load_image_folder(&dir, Split::Train, resize)?;
                let (test, test_names) = load_image_folder(&dir, Split::Test, resize)?;
                if names != test_names {
                    return Err(Error::Dataset(format!("train and test class folders differ under {}", dir.display())));
                }
                Ok((train, test))
            }
        }
    }
}

/// Whether stage two runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageMode {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "1-only")]
    Stage1Only,
}

impl std::str::FromStr for StageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "1-only" => Ok(Self::Stage1Only),
            _ => Err(Error::Config(format!("unknown stage mode `{s}` (expected `full` or `1-only`)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub stage: StageMode,
    /// Keep only the first `train_limit` training images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub train: TrainPlan,
    #[serde(default = "BackboneSpec::resnet18")]
    pub backbone: BackboneSpec,
}

impl ExperimentConfig {
    pub fn new(seed: u64, out_dir: PathBuf, dataset: DatasetSpec, noise: NoiseSpec) -> Self {
        let mut c = Self {
            seed,
            out_dir,
            stage: StageMode::Full,
            train_limit: None,
            dataset,
            noise,
            train: TrainPlan::default(),
            backbone: BackboneSpec::resnet18(),
        };
        c.train.seed = seed;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.train.seed = c.seed;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Plan with the experiment seed applied.
    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} does not fit a TOML integer", self.seed)));
        }
        if self.train_limit == Some(0) {
            return Err(Error::Config("train_limit must be positive".into()));
        }
        self.train.validate()?;
        self.backbone.validate()?;
        Ok(())
    }

    fn digest(value: &Self) -> String {
        let json = serde_json::to_string(value).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// Ties artifacts to these exact settings.
    pub fn config_hash(&self) -> String {
        Self::digest(self)
    }

    /// Same as the config hash but blind to the seed and output directory,
    /// so repeated seeds of one setting share it.
    pub fn group_hash(&self) -> String {
        let mut c = self.clone();
        c.set_seed(0);
        c.out_dir = PathBuf::new();
        Self::digest(&c)
    }

    /// Name of the ablation arm this config runs.
    pub fn arm(&self) -> &'static str {
        match (self.train.lambda == 0.0, self.stage) {
            (true, StageMode::Stage1Only) => "ce",
            (false, StageMode::Stage1Only) => "stage1",
            (true, StageMode::Full) => "ce+stage2",
            (false, StageMode::Full) => "stage1+2",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PairMap;

    fn sample() -> ExperimentConfig {
        let mut c = ExperimentConfig::new(
            7,
            "runs/a".into(),
            DatasetSpec::Cifar10 { path: "data/cifar-10".into() },
            NoiseSpec::asymmetric_pairs(0.4, PairMap::cifar10()),
        );
        c.train.lambda = 0.35;
        c.train.tau_cwcl = 0.123456789;
        c.train.instance_head.hidden = None;
        c
    }

    #[test]
    fn toml_round_trip() {
        for c in [sample(), ExperimentConfig::new(1, "x".into(), DatasetSpec::default(), NoiseSpec::symmetric(0.2))] {
            let text = c.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c, "{text}");
        }
    }

    #[test]
    fn hashes() {
        let a = sample();
        let mut b = sample();
        b.set_seed(8);
        b.out_dir = "elsewhere".into();
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.group_hash(), b.group_hash());
        let mut c = sample();
        c.train.gamma = 0.8;
        assert_ne!(a.group_hash(), c.group_hash());
        assert_eq!(a.config_hash().len(), 16);
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let c = ExperimentConfig::from_toml(
            "seed = 3\nout_dir = \"runs/x\"\n[noise]\nkind = \"symmetric\"\nrate = 0.4\n",
        )
        .unwrap();
        assert_eq!(c.plan().seed, 3);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.backbone, BackboneSpec::resnet18());
        assert_eq!(c.dataset.name(), "synthetic");
        assert_eq!(c.arm(), "stage1+2");
        assert!(ExperimentConfig::from_toml("seed = 3\nout_dir = \"x\"\nbogus = 1\n[noise]\nkind = \"symmetric\"\nrate = 0.4\n").is_err());
    }
}
