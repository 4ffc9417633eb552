use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RunMetrics, Stage};
use crate::confident::{read_selection, write_selection, ConfidentSet};
use crate::corpus::ImageShape;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_file, write_file, NamedTensor, TensorData};
use crate::nn::{BackboneSpec, StateDict, Tensor};

const FORMAT: u32 = 1;

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainCheckpoint {
    pub config_hash: String,
    /// Stage of the last completed epoch.
    pub stage: Stage,
    pub epochs_completed: usize,
    pub step: u64,
    pub backbone: BackboneSpec,
    pub input: ImageShape,
    pub num_classes: usize,
    pub model: StateDict,
    pub ema_shadow: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub ema_updates: u64,
    pub heads: StateDict,
    pub optim: Vec<(String, Tensor)>,
    /// Selection in force for the current round (stage two only).
    pub selection: Option<ConfidentSet>,
    /// Most recent non-empty selection, kept for the empty-round fallback.
    pub last_nonempty: Option<ConfidentSet>,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SelectionRef {
    file: String,
    round: u64,
    threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config_hash: String,
    stage: Stage,
    epochs_completed: usize,
    step: u64,
    ema_updates: u64,
    backbone: BackboneSpec,
    input: ImageShape,
    num_classes: usize,
    selection: Option<SelectionRef>,
    last_nonempty: Option<SelectionRef>,
    /// File name to SHA-256 hex digest.
    files: BTreeMap<String, String>,
}

fn digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn f32_tensors(state: &StateDict) -> Vec<NamedTensor> {
    NamedTensor::from_state(state)
}

fn dir_name(stage: Stage, epochs: usize) -> String {
    format!("stage{}-{epochs:04}", stage.number())
}

impl TrainCheckpoint {
    /// Writes `{run}/ckpt/stage{s}-{epochs}/`. The directory appears only
    /// once complete.
    pub fn save(&self, run_dir: &Path) -> Result<PathBuf> {
        let root = run_dir.join("ckpt");
        let final_dir = root.join(dir_name(self.stage, self.epochs_completed));
        let tmp = root.join(format!(".{}.partial", dir_name(self.stage, self.epochs_completed)));
        let io = |p: &Path, e| Error::io(format!("writing {}", p.display()), e);
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| io(&tmp, e))?;

        write_file(&tmp.join("model.tensors"), &f32_tensors(&self.model))?;
        write_file(&tmp.join("heads.tensors"), &f32_tensors(&self.heads))?;
        let ema: Vec<NamedTensor> = self
            .ema_shadow
            .iter()
            .map(|(n, s, v)| NamedTensor {
                name: n.clone(),
                shape: s.clone(),
                data: TensorData::F64(v.clone()),
            })
            .collect();
        write_file(&tmp.join("ema.tensors"), &ema)?;
        write_file(&tmp.join("optim.tensors"), &f32_tensors(&StateDict { entries: self.optim.clone() }))?;
        self.metrics.write_csv(&tmp.join("metrics.csv"))?;
        let sel_ref = |set: &Option<ConfidentSet>, file: &str| -> Result<Option<SelectionRef>> {
            match set {
                Some(s) => {
                    write_selection(&tmp.join(file), s)?;
                    Ok(Some(SelectionRef {
                        file: file.into(),
                        round: s.round,
                        threshold: s.threshold,
                    }))
                }
                None => Ok(None),
            }
        };
        let selection = sel_ref(&self.selection, "selection.csv")?;
        let last_nonempty = sel_ref(&self.last_nonempty, "last-nonempty.csv")?;

        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(&tmp).map_err(|e| io(&tmp, e))? {
            let path = entry.map_err(|e| io(&tmp, e))?.path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            files.insert(name, digest_file(&path)?);
        }
        let manifest = Manifest {
            format: FORMAT,
            config_hash: self.config_hash.clone(),
            stage: self.stage,
            epochs_completed: self.epochs_completed,
            step: self.step,
            ema_updates: self.ema_updates,
            backbone: self.backbone.clone(),
            input: self.input,
            num_classes: self.num_classes,
            selection,
            last_nonempty,
            files,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mpath = tmp.join("manifest.json");
        std::fs::write(&mpath, text).map_err(|e| io(&mpath, e))?;
        if final_dir.exists() {
            std::fs::remove_dir_all(&final_dir).map_err(|e| io(&final_dir, e))?;
        }
        std::fs::rename(&tmp, &final_dir).map_err(|e| io(&final_dir, e))?;
        Ok(final_dir)
    }

    /// Reads a checkpoint directory, verifying every file digest.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(format!("reading {}", mpath.display()), e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
        if m.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", m.format)));
        }
        for (name, want) in &m.files {
            let got = digest_file(&dir.join(name))?;
            if &got != want {
                return Err(Error::Checkpoint(format!("{} fails its checksum", dir.join(name).display())));
            }
        }
        let state = |file: &str| -> Result<StateDict> { NamedTensor::into_state(read_file(&dir.join(file))?) };
        let ema_shadow = read_file(&dir.join("ema.tensors"))?
            .into_iter()
            .map(|t| match t.data {
                TensorData::F64(v) => Ok((t.name, t.shape, v)),
                TensorData::F32(_) => Err(Error::Checkpoint(format!("EMA tensor {} is not f64", t.name))),
            })
            .collect::<Result<_>>()?;
        let sel = |r: &Option<SelectionRef>| -> Result<Option<ConfidentSet>> {
            r.as_ref()
                .map(|r| read_selection(&dir.join(&r.file), r.round, r.threshold))
                .transpose()
        };
        Ok(Self {
            config_hash: m.config_hash,
            stage: m.stage,
            epochs_completed: m.epochs_completed,
            step: m.step,
            backbone: m.backbone,
            input: m.input,
            num_classes: m.num_classes,
            model: state("model.tensors")?,
            ema_shadow,
            ema_updates: m.ema_updates,
            heads: state("heads.tensors")?,
            optim: state("optim.tensors")?.entries,
            selection: sel(&m.selection)?,
            last_nonempty: sel(&m.last_nonempty)?,
            metrics: RunMetrics::read_csv(&dir.join("metrics.csv"))?,
        })
    }
}

/// Completed checkpoint directories under `run_dir`, oldest first.
pub fn find_checkpoints(run_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let root = run_dir.join("ckpt");
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(&root).map_err(|e| Error::io(format!("listing {}", root.display()), e))? {
        let path = entry.map_err(|e| Error::io(format!("listing {}", root.display()), e))?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with('.') || !path.join("manifest.json").exists() {
            continue;
        }
        if let Some(epochs) = name.rsplit('-').next().and_then(|e| e.parse::<usize>().ok()) {
            found.push((epochs, path));
        }
    }
    found.sort();
    Ok(found)
}

pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    Ok(find_checkpoints(run_dir)?.pop().map(|(_, p)| p))
}
