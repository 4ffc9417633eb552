//! Projection heads used only during training.
//!
//! A *channel head* maps every channel of a tapped feature map (its H·W
//! spatial values) to a contrast vector; the weights are shared across the
//! channels of one layer, and channel order is preserved. An *instance head*
//! maps the globally pooled tap of each sample to one embedding.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layers::{avg_pool, avg_pool_backward, relu_backward, relu_inplace, Linear};
use super::tensor::{Param, StateDict, Tensor, Tensor4};
use super::{join, Parameterized};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Head layout: `in → hidden → ReLU → out`, or a single linear map when
/// `hidden` is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub hidden: Option<usize>,
    pub out: usize,
    pub bias: bool,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            hidden: Some(128),
            out: 64,
            bias: true,
        }
    }
}

impl HeadSpec {
    pub fn linear(out: usize) -> Self {
        Self {
            hidden: None,
            out,
            bias: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Channel,
    Instance,
}

/// Unit-norm channel vectors of one sample at one tapped layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBank {
    pub layer_index: usize,
    /// `M × d`, one row per input channel in channel order.
    pub channels: Array2<f32>,
}

impl ChannelBank {
    pub fn len(&self) -> usize {
        self.channels.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.nrows() == 0
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionHead {
    kind: HeadKind,
    layer: usize,
    /// Expected tap channels (instance heads) or H·W (channel heads).
    in_dim: usize,
    fc1: Linear,
    fc2: Option<Linear>,
}

/// Saved activations for one head pass.
#[derive(Debug)]
pub struct HeadCache {
    rows: usize,
    input: Vec<f32>,
    hidden: Option<Vec<f32>>,
    tap_dims: (usize, usize, usize, usize),
}

impl ProjectionHead {
    fn build(kind: HeadKind, layer: usize, in_dim: usize, spec: HeadSpec, seed: u64) -> Result<Self> {
        if in_dim == 0 || spec.out == 0 || spec.hidden == Some(0) {
            return Err(Error::Config("projection head dimensions must be positive".into()));
        }
        let tag = if kind == HeadKind::Channel { 20_000 } else { 30_000 };
        let mut rng = stream(seed, Purpose::Init, tag + layer as u64, 0);
        let (fc1, fc2) = match spec.hidden {
            Some(h) => (
                Linear::new(in_dim, h, spec.bias, &mut rng),
                Some(Linear::new(h, spec.out, spec.bias, &mut rng)),
            ),
            None => (Linear::new(in_dim, spec.out, spec.bias, &mut rng), None),
        };
        Ok(Self {
            kind,
            layer,
            in_dim,
            fc1,
            fc2,
        })
    }

    /// Head for tap `layer` whose maps are `(m, h, w)`.
    pub fn channel(layer: usize, tap: (usize, usize, usize), spec: HeadSpec, seed: u64) -> Result<Self> {
        Self::build(HeadKind::Channel, layer, tap.1 * tap.2, spec, seed)
    }

    pub fn instance(layer: usize, tap: (usize, usize, usize), spec: HeadSpec, seed: u64) -> Result<Self> {
        Self::build(HeadKind::Instance, layer, tap.0, spec, seed)
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.as_ref().unwrap_or(&self.fc1).out_dim
    }

    fn check_tap(&self, tap: &Tensor4, layer: usize) -> Result<()> {
        let got = match self.kind {
            HeadKind::Channel => tap.plane(),
            HeadKind::Instance => tap.c,
        };
        if layer != self.layer || got != self.in_dim {
            return Err(Error::shape(
                "projection head input",
                format!("layer {} with input width {}", self.layer, self.in_dim),
                format!("layer {layer} with input width {got}"),
            ));
        }
        Ok(())
    }

    fn mlp(&self, x: &[f32], rows: usize) -> (Vec<f32>, Option<Vec<f32>>) {
        let mut h = self.fc1.forward(x, rows);
        match &self.fc2 {
            Some(fc2) => {
                relu_inplace(&mut h);
                let y = fc2.forward(&h, rows);
                (y, Some(h))
            }
            None => (h, None),
        }
    }

    /// Unnormalized projections, one row per channel (channel heads:
    /// `n·m` rows in sample-major order) or per sample (instance heads).
    pub fn forward_train(&self, tap: &Tensor4, layer: usize) -> Result<(Vec<f32>, HeadCache)> {
        self.check_tap(tap, layer)?;
        let (input, rows) = match self.kind {
            HeadKind::Channel => (tap.data.clone(), tap.n * tap.c),
            HeadKind::Instance => (avg_pool(tap), tap.n),
        };
        let (y, hidden) = self.mlp(&input, rows);
        Ok((
            y,
            HeadCache {
                rows,
                input,
                hidden,
                tap_dims: tap.dims(),
            },
        ))
    }

    /// Accumulates head gradients and returns the gradient on the tap.
    pub fn backward(&mut self, cache: &HeadCache, dy: &[f32]) -> Tensor4 {
        let rows = cache.rows;
        let dx = match (&mut self.fc2, &cache.hidden) {
            (Some(fc2), Some(h)) => {
                let mut dh = fc2.backward(h, dy, rows);
                relu_backward(h, &mut dh);
                self.fc1.backward(&cache.input, &dh, rows)
            }
            _ => self.fc1.backward(&cache.input, dy, rows),
        };
        let (n, c, h, w) = cache.tap_dims;
        match self.kind {
            HeadKind::Channel => Tensor4 { n, c, h, w, data: dx },
            HeadKind::Instance => avg_pool_backward(&dx, n, c, h, w),
        }
    }

    /// Projects one sample's tap into its unit-normalized channel bank.
    pub fn project_channels(&self, tap: &Tensor4, layer: usize, sample: usize) -> Result<ChannelBank> {
        if self.kind != HeadKind::Channel {
            return Err(Error::InvalidInput("instance head cannot project channels".into()));
        }
        self.check_tap(tap, layer)?;
        if sample >= tap.n {
            return Err(Error::InvalidInput(format!("sample {sample} outside batch of {}", tap.n)));
        }
        let (mut y, _) = self.mlp(tap.sample(sample), tap.c);
        let d = self.out_dim();
        for (m, row) in y.chunks_mut(d).enumerate() {
            let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "channel {m} of layer {layer} projects to a zero or non-finite vector"
                )));
            }
            row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
        let channels = Array2::from_shape_vec((tap.c, d), y).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(ChannelBank {
            layer_index: layer,
            channels,
        })
    }

    pub fn state_dict(&self, prefix: &str) -> StateDict {
        let mut entries = Vec::new();
        let mut push = |name: &str, t: &Tensor| entries.push((join(prefix, name), t.clone()));
        push("fc1.weight", &self.fc1.weight.value);
        if let Some(b) = &self.fc1.bias {
            push("fc1.bias", &b.value);
        }
        if let Some(fc2) = &self.fc2 {
            push("fc2.weight", &fc2.weight.value);
            if let Some(b) = &fc2.bias {
                push("fc2.bias", &b.value);
            }
        }
        StateDict { entries }
    }

    pub fn load_state_dict(&mut self, prefix: &str, state: &StateDict) -> Result<()> {
        self.state_dict(prefix).check_compatible(state, "projection head state")?;
        let mut it = state.entries.iter().map(|(_, t)| t);
        let mut take = |dst: &mut Param| {
            if let Some(src) = it.next() {
                dst.value.data.copy_from_slice(&src.data);
            }
        };
        take(&mut self.fc1.weight);
        if let Some(b) = &mut self.fc1.bias {
            take(b);
        }
        if let Some(fc2) = &mut self.fc2 {
            take(&mut fc2.weight);
            if let Some(b) = &mut fc2.bias {
                take(b);
            }
        }
        Ok(())
    }
}

impl Parameterized for ProjectionHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "fc1.weight"), &mut self.fc1.weight);
        if let Some(b) = &mut self.fc1.bias {
            f(&join(prefix, "fc1.bias"), b);
        }
        if let Some(fc2) = &mut self.fc2 {
            f(&join(prefix, "fc2.weight"), &mut fc2.weight);
            if let Some(b) = &mut fc2.bias {
                f(&join(prefix, "fc2.bias"), b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tap(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
        use rand::Rng;
        let mut rng = stream(seed, Purpose::Init, 77, 0);
        let data = (0..n * c * h * w).map(|_| rng.gen_range(0.0..2.0)).collect();
        Tensor4::from_vec(n, c, h, w, data).unwrap()
    }

    #[test]
    fn bank_keeps_channel_count_and_unit_norm() {
        let t = tap(2, 3, 4, 4, 1);
        let head = ProjectionHead::channel(1, (3, 4, 4), HeadSpec::default(), 5).unwrap();
        let bank = head.project_channels(&t, 1, 1).unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.layer_index, 1);
        for row in bank.channels.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_mismatch_is_an_error() {
        let head = ProjectionHead::channel(0, (3, 4, 4), HeadSpec::default(), 5).unwrap();
        assert!(head.project_channels(&tap(1, 3, 4, 4, 2), 2, 0).is_err());
        assert!(head.project_channels(&tap(1, 3, 2, 2, 2), 0, 0).is_err());
    }

    #[test]
    fn bias_free_heads_are_scale_invariant_after_normalization() {
        // Linear and ReLU are positively homogeneous; normalization removes the scale.
        for spec in [
            HeadSpec::linear(6),
            HeadSpec {
                hidden: Some(5),
                out: 6,
                bias: false,
            },
        ] {
            let head = ProjectionHead::channel(0, (3, 4, 4), spec, 9).unwrap();
            let t = tap(1, 3, 4, 4, 3);
            let mut t2 = t.clone();
            t2.scale(2.0);
            let a = head.project_channels(&t, 0, 0).unwrap();
            let b = head.project_channels(&t2, 0, 0).unwrap();
            for (x, y) in a.channels.iter().zip(b.channels.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn permuting_channels_permutes_bank_rows() {
        let head = ProjectionHead::channel(0, (3, 2, 2), HeadSpec::default(), 1).unwrap();
        let t = tap(1, 3, 2, 2, 4);
        let mut swapped = t.clone();
        swapped.data[0..4].copy_from_slice(&t.data[8..12]);
        swapped.data[8..12].copy_from_slice(&t.data[0..4]);
        let a = head.project_channels(&t, 0, 0).unwrap();
        let b = head.project_channels(&swapped, 0, 0).unwrap();
        assert_eq!(a.channels.row(0), b.channels.row(2));
        assert_eq!(a.channels.row(1), b.channels.row(1));
    }
}
