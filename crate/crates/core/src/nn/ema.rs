use super::backbone::TappedBackbone;
use super::tensor::{StateDict, Tensor};
use crate::error::{Error, Result};

/// Exponential moving average of model state (parameters and batch-norm
/// buffers). The shadow is kept in f64 so long averages do not stall on f32
/// rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    decay: f64,
    shadow: Option<Vec<(String, Vec<usize>, Vec<f64>)>>,
    updates: u64,
    warmup: bool,
}

impl EmaState {
    /// An uninitialized average; call [`EmaState::init`] before use.
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} is outside [0, 1]")));
        }
        Ok(Self {
            decay,
            shadow: None,
            updates: 0,
            warmup: false,
        })
    }

    /// Caps the decay at `(1 + t)/(10 + t)` for update `t`, so early averages
    /// are not dominated by the initial weights.
    pub fn with_warmup(mut self, on: bool) -> Self {
        self.warmup = on;
        self
    }

    /// Decay that the next update will use.
    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let t = self.updates as f64;
            self.decay.min((1.0 + t) / (10.0 + t))
        } else {
            self.decay
        }
    }

    pub fn from_model(model: &TappedBackbone, decay: f64) -> Result<Self> {
        let mut ema = Self::new(decay)?;
        ema.init(&model.state_dict());
        Ok(ema)
    }

    /// Copies `state` into the shadow.
    pub fn init(&mut self, state: &StateDict) {
        self.shadow = Some(
            state
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.shape.clone(), t.data.iter().map(|&v| v as f64).collect()))
                .collect(),
        );
        self.updates = 0;
    }

    /// Restores a shadow saved in full precision.
    pub fn restore(&mut self, shadow: Vec<(String, Vec<usize>, Vec<f64>)>, updates: u64) {
        self.shadow = Some(shadow);
        self.updates = updates;
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn is_initialized(&self) -> bool {
        self.shadow.is_some()
    }

    pub fn shadow(&self) -> Result<&[(String, Vec<usize>, Vec<f64>)]> {
        self.shadow
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("EMA state is not initialized".into()))
    }

    /// `shadow ← decay·shadow + (1 − decay)·live`, elementwise.
    pub fn update_from(&mut self, live: &StateDict) -> Result<()> {
        let decay = self.effective_decay();
        let shadow = self
            .shadow
            .as_mut()
            .ok_or_else(|| Error::InvalidInput("EMA state is not initialized".into()))?;
        if shadow.len() != live.entries.len() {
            return Err(Error::shape("EMA update", format!("{} tensors", shadow.len()), format!("{} tensors", live.entries.len())));
        }
        for ((name, shape, _), (lname, t)) in shadow.iter().zip(&live.entries) {
            if name != lname || *shape != t.shape {
                return Err(Error::shape("EMA update", format!("{name} {shape:?}"), format!("{lname} {:?}", t.shape)));
            }
        }
        for ((_, _, s), (_, t)) in shadow.iter_mut().zip(&live.entries) {
            for (sv, &lv) in s.iter_mut().zip(&t.data) {
                *sv = decay * *sv + (1.0 - decay) * lv as f64;
            }
        }
        self.updates += 1;
        Ok(())
    }

    pub fn update(&mut self, live: &TappedBackbone) -> Result<()> {
        self.update_from(&live.state_dict())
    }

    /// The averaged state rounded to f32.
    pub fn snapshot_state(&self) -> Result<StateDict> {
        Ok(StateDict {
            entries: self
                .shadow()?
                .iter()
                .map(|(n, shape, v)| {
                    (
                        n.clone(),
                        Tensor {
                            shape: shape.clone(),
                            data: v.iter().map(|&x| x as f32).collect(),
                        },
                    )
                })
                .collect(),
        })
    }

    /// A model carrying the averaged weights; `template` supplies the
    /// architecture and is left untouched.
    pub fn snapshot_for_eval(&self, template: &TappedBackbone) -> Result<TappedBackbone> {
        let mut model = template.clone();
        model.load_state_dict(&self.snapshot_state()?)?;
        Ok(model)
    }
}
