use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::Parameterized;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `g ← grad + wd·w; v ← μ·v + g; w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<(String, Vec<f32>)>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    /// Applies one update to each module's parameters, in order. Velocity
    /// buffers are created on first use and matched by name afterwards.
    pub fn step(&mut self, lr: f32, modules: &mut [&mut dyn Parameterized]) -> Result<()> {
        let SgdConfig {
            momentum,
            weight_decay,
        } = self.config;
        let mut slot = 0usize;
        let mut failure: Option<Error> = None;
        let velocity = &mut self.velocity;
        for (m, module) in modules.iter_mut().enumerate() {
            module.visit_params(&format!("m{m}"), &mut |name, p| {
                if failure.is_some() {
                    return;
                }
                if slot == velocity.len() {
                    velocity.push((name.to_string(), vec![0.0; p.value.len()]));
                }
                let (vname, v) = &mut velocity[slot];
                if vname != name || v.len() != p.value.len() {
                    failure = Some(Error::shape("optimizer state", vname.clone(), name));
                    return;
                }
                for ((w, g), vel) in p.value.data.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                    let grad = g + weight_decay * *w;
                    *vel = momentum * *vel + grad;
                    *w -= lr * *vel;
                }
                slot += 1;
            });
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn state(&self) -> Vec<(String, Tensor)> {
        self.velocity
            .iter()
            .map(|(n, v)| {
                (
                    n.clone(),
                    Tensor {
                        shape: vec![v.len()],
                        data: v.clone(),
                    },
                )
            })
            .collect()
    }

    pub fn load_state(&mut self, state: Vec<(String, Tensor)>) {
        self.velocity = state.into_iter().map(|(n, t)| (n, t.data)).collect();
    }
}
