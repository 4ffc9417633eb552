use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool, avg_pool_backward, relu_backward, relu_inplace, BatchNorm2d, BnCache, Conv2d, Linear,
};
use super::tensor::{Param, StateDict, Tensor, Tensor4};
use super::{join, Parameterized};
use crate::corpus::{Image, ImageShape};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Residual backbone layout: a 3×3 stem followed by stages of basic blocks.
/// The output of each stage is tapped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub stem_width: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub strides: Vec<usize>,
}

impl BackboneSpec {
    /// CIFAR-style ResNet-18: four stages of two basic blocks.
    pub fn resnet18() -> Self {
        Self {
            stem_width: 64,
            widths: vec![64, 128, 256, 512],
            blocks: vec![2, 2, 2, 2],
            strides: vec![1, 2, 2, 2],
        }
    }

    /// One block per stage with narrow widths, for CPU desk runs.
    pub fn small() -> Self {
        Self {
            stem_width: 16,
            widths: vec![16, 32, 32, 64],
            blocks: vec![1, 1, 1, 1],
            strides: vec![1, 2, 2, 2],
        }
    }

    pub fn num_taps(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.widths.len();
        if l == 0 || self.blocks.len() != l || self.strides.len() != l {
            return Err(Error::Config(format!(
                "backbone needs equal-length, non-empty widths/blocks/strides (got {}/{}/{})",
                l,
                self.blocks.len(),
                self.strides.len()
            )));
        }
        if self.stem_width == 0
            || self.widths.contains(&0)
            || self.blocks.contains(&0)
            || self.strides.contains(&0)
        {
            return Err(Error::Config("backbone widths, blocks and strides must be positive".into()));
        }
        Ok(())
    }

    /// Shapes (M, H, W) of each tap for a given input.
    pub fn tap_shapes(&self, input: ImageShape) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (input.height, input.width);
        self.widths
            .iter()
            .zip(&self.strides)
            .map(|(&c, &s)| {
                h = (h + 2 - 3) / s + 1;
                w = (w + 2 - 3) / s + 1;
                (c, h, w)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
struct ConvBnCache {
    input: Tensor4,
    bn: BnCache,
}

impl ConvBn {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, layer_id: u64, seed: u64) -> Self {
        let mut rng = stream(seed, Purpose::Init, layer_id, 0);
        Self {
            conv: Conv2d::new(cin, cout, k, stride, pad, &mut rng),
            bn: BatchNorm2d::new(cout),
        }
    }

    fn forward_eval(&self, x: &Tensor4) -> Tensor4 {
        self.bn.forward_eval(&self.conv.forward(x))
    }

    fn forward_train(&mut self, x: Tensor4) -> (Tensor4, ConvBnCache) {
        let h = self.conv.forward(&x);
        let (y, bn) = self.bn.forward_train(&h);
        (y, ConvBnCache { input: x, bn })
    }

    fn backward(&mut self, cache: &ConvBnCache, dy: &Tensor4) -> Tensor4 {
        let dh = self.bn.backward(&cache.bn, dy);
        self.conv.backward(&cache.input, &dh)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "conv.weight"), &mut self.conv.weight);
        f(&join(prefix, "bn.weight"), &mut self.bn.gamma);
        f(&join(prefix, "bn.bias"), &mut self.bn.beta);
    }

    fn visit_state_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "conv.weight"), &self.conv.weight.value);
        f(join(prefix, "bn.weight"), &self.bn.gamma.value);
        f(join(prefix, "bn.bias"), &self.bn.beta.value);
        f(join(prefix, "bn.running_mean"), &self.bn.running_mean);
        f(join(prefix, "bn.running_var"), &self.bn.running_var);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "conv.weight"), &mut self.conv.weight.value);
        f(join(prefix, "bn.weight"), &mut self.bn.gamma.value);
        f(join(prefix, "bn.bias"), &mut self.bn.beta.value);
        f(join(prefix, "bn.running_mean"), &mut self.bn.running_mean);
        f(join(prefix, "bn.running_var"), &mut self.bn.running_var);
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    c1: ConvBnCache,
    c2: ConvBnCache,
    shortcut: Option<ConvBnCache>,
    out: Tensor4,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, id: u64, seed: u64) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, 0, id * 4 + 2, seed));
        Self {
            conv1: ConvBn::new(cin, cout, 3, stride, 1, id * 4, seed),
            conv2: ConvBn::new(cout, cout, 3, 1, 1, id * 4 + 1, seed),
            shortcut,
        }
    }

    fn forward_eval(&self, x: &Tensor4) -> Tensor4 {
        let mut h = self.conv1.forward_eval(x);
        relu_inplace(&mut h.data);
        let mut out = self.conv2.forward_eval(&h);
        match &self.shortcut {
            Some(sc) => out.add_assign(&sc.forward_eval(x)),
            None => out.add_assign(x),
        }
        relu_inplace(&mut out.data);
        out
    }

    fn forward_train(&mut self, x: Tensor4) -> (Tensor4, BlockCache) {
        let (mut h, c1) = self.conv1.forward_train(x);
        relu_inplace(&mut h.data);
        let (mut out, c2) = self.conv2.forward_train(h);
        let shortcut = match &mut self.shortcut {
            Some(sc) => {
                let (s, cache) = sc.forward_train(c1.input.clone());
                out.add_assign(&s);
                Some(cache)
            }
            None => {
                out.add_assign(&c1.input);
                None
            }
        };
        relu_inplace(&mut out.data);
        (
            out.clone(),
            BlockCache {
                c1,
                c2,
                shortcut,
                out,
            },
        )
    }

    fn backward(&mut self, cache: &BlockCache, mut dout: Tensor4) -> Tensor4 {
        relu_backward(&cache.out.data, &mut dout.data);
        let mut dh = self.conv2.backward(&cache.c2, &dout);
        relu_backward(&cache.c2.input.data, &mut dh.data);
        let mut dx = self.conv1.backward(&cache.c1, &dh);
        match (&mut self.shortcut, &cache.shortcut) {
            (Some(sc), Some(c)) => dx.add_assign(&sc.backward(c, &dout)),
            _ => dx.add_assign(&dout),
        }
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit_params(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_state_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv1.visit_state_ref(&join(prefix, "conv1"), f);
        self.conv2.visit_state_ref(&join(prefix, "conv2"), f);
        if let Some(sc) = &self.shortcut {
            sc.visit_state_ref(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit_state(&join(prefix, "conv1"), f);
        self.conv2.visit_state(&join(prefix, "conv2"), f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit_state(&join(prefix, "shortcut"), f);
        }
    }
}

/// Logits (`n × num_classes`, row-major) plus one feature map per tap.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f32>,
    pub num_classes: usize,
    pub taps: Vec<Tensor4>,
}

impl ForwardOutput {
    pub fn batch(&self) -> usize {
        self.logits.len() / self.num_classes
    }

    pub fn logits_row(&self, i: usize) -> &[f32] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

/// Activations saved by a training forward pass.
#[derive(Debug)]
pub struct Tape {
    stem: ConvBnCache,
    stem_out: Tensor4,
    stages: Vec<Vec<BlockCache>>,
    pooled: Vec<f32>,
}

/// Residual encoder with stage taps and a linear classifier.
#[derive(Debug, Clone)]
pub struct TappedBackbone {
    spec: BackboneSpec,
    input: ImageShape,
    num_classes: usize,
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
    classifier: Linear,
}

impl TappedBackbone {
    pub fn new(spec: BackboneSpec, input: ImageShape, num_classes: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if num_classes < 1 || input.is_empty() {
            return Err(Error::Config("backbone needs classes and a non-empty input".into()));
        }
        let stem = ConvBn::new(input.channels, spec.stem_width, 3, 1, 1, 0, seed);
        let mut cin = spec.stem_width;
        let mut stages = Vec::new();
        let mut id = 1u64;
        for l in 0..spec.num_taps() {
            let mut blocks = Vec::new();
            for b in 0..spec.blocks[l] {
                let stride = if b == 0 { spec.strides[l] } else { 1 };
                blocks.push(BasicBlock::new(cin, spec.widths[l], stride, id, seed));
                cin = spec.widths[l];
                id += 1;
            }
            stages.push(blocks);
        }
        let classifier = Linear::new(cin, num_classes, true, &mut stream(seed, Purpose::Init, 10_000, 0));
        Ok(Self {
            spec,
            input,
            num_classes,
            stem,
            stages,
            classifier,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_taps(&self) -> usize {
        self.stages.len()
    }

    pub fn tap_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.spec.tap_shapes(self.input)
    }

    pub fn classifier_mut(&mut self) -> &mut Linear {
        &mut self.classifier
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let expected = (self.input.channels, self.input.height, self.input.width);
        if (x.c, x.h, x.w) != expected || x.n == 0 {
            return Err(Error::shape(
                "backbone input",
                format!("N×{}×{}×{} with N ≥ 1", expected.0, expected.1, expected.2),
                format!("{}×{}×{}×{}", x.n, x.c, x.h, x.w),
            ));
        }
        Ok(())
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    pub fn forward(&self, x: &Tensor4) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let mut h = self.stem.forward_eval(x);
        relu_inplace(&mut h.data);
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                h = block.forward_eval(&h);
            }
            taps.push(h.clone());
        }
        let pooled = avg_pool(&h);
        let logits = self.classifier.forward(&pooled, h.n);
        Ok(ForwardOutput {
            logits,
            num_classes: self.num_classes,
            taps,
        })
    }

    pub fn forward_images(&self, images: &[Image]) -> Result<ForwardOutput> {
        self.forward(&Tensor4::from_images(images, self.input)?)
    }

    /// Training-mode forward pass. Batch norm uses batch statistics and
    /// updates its running estimates.
    pub fn forward_train(&mut self, x: Tensor4) -> Result<(ForwardOutput, Tape)> {
        self.check_input(&x)?;
        let (mut h, stem) = self.stem.forward_train(x);
        relu_inplace(&mut h.data);
        let stem_out = h.clone();
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            let mut stage_caches = Vec::with_capacity(stage.len());
            for block in stage.iter_mut() {
                let (out, cache) = block.forward_train(h);
                stage_caches.push(cache);
                h = out;
            }
            taps.push(h.clone());
            caches.push(stage_caches);
        }
        let pooled = avg_pool(&h);
        let logits = self.classifier.forward(&pooled, h.n);
        Ok((
            ForwardOutput {
                logits,
                num_classes: self.num_classes,
                taps,
            },
            Tape {
                stem,
                stem_out,
                stages: caches,
                pooled,
            },
        ))
    }

    /// Accumulates parameter gradients given the loss gradient with respect
    /// to the logits and (optionally) to each tap.
    pub fn backward(&mut self, tape: &Tape, dlogits: &[f32], dtaps: &[Option<Tensor4>]) -> Result<()> {
        let last = tape
            .stages
            .last()
            .and_then(|s| s.last())
            .map(|c| &c.out)
            .ok_or_else(|| Error::InvalidInput("empty tape".into()))?;
        let (n, c, h, w) = last.dims();
        if dlogits.len() != n * self.num_classes {
            return Err(Error::shape("logit gradient", n * self.num_classes, dlogits.len()));
        }
        if dtaps.len() > self.stages.len() {
            return Err(Error::shape("tap gradients", self.stages.len(), dtaps.len()));
        }
        let dpooled = self.classifier.backward(&tape.pooled, dlogits, n);
        let mut grad = avg_pool_backward(&dpooled, n, c, h, w);
        for l in (0..self.stages.len()).rev() {
            if let Some(Some(dt)) = dtaps.get(l) {
                if !dt.same_dims(&grad) {
                    return Err(Error::shape("tap gradient", format!("{:?}", grad.dims()), format!("{:?}", dt.dims())));
                }
                grad.add_assign(dt);
            }
            for (block, cache) in self.stages[l].iter_mut().zip(&tape.stages[l]).rev() {
                grad = block.backward(cache, grad);
            }
        }
        relu_backward(&tape.stem_out.data, &mut grad.data);
        self.stem.backward(&tape.stem, &grad);
        Ok(())
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem.visit_state("stem", f);
        for (l, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_state(&format!("layer{}.{b}", l + 1), f);
            }
        }
        f("fc.weight".into(), &mut self.classifier.weight.value);
        if let Some(bias) = &mut self.classifier.bias {
            f("fc.bias".into(), &mut bias.value);
        }
    }

    /// Visits parameters and batch-norm buffers in state-dict order.
    pub fn visit_state(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.stem.visit_state_ref("stem", f);
        for (l, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.visit_state_ref(&format!("layer{}.{b}", l + 1), f);
            }
        }
        f("fc.weight".into(), &self.classifier.weight.value);
        if let Some(bias) = &self.classifier.bias {
            f("fc.bias".into(), &bias.value);
        }
    }

    /// Parameters and batch-norm buffers, by name.
    pub fn state_dict(&self) -> StateDict {
        let mut entries = Vec::new();
        self.visit_state(&mut |name, t| entries.push((name, t.clone())));
        StateDict { entries }
    }

    pub fn load_state_dict(&mut self, state: &StateDict) -> Result<()> {
        self.state_dict().check_compatible(state, "backbone state")?;
        let mut it = state.entries.iter();
        self.visit_state_mut(&mut |_, t| {
            if let Some((_, src)) = it.next() {
                t.data.copy_from_slice(&src.data);
            }
        });
        Ok(())
    }
}

impl Parameterized for TappedBackbone {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (l, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_params(&join(prefix, &format!("layer{}.{b}", l + 1)), f);
            }
        }
        f(&join(prefix, "fc.weight"), &mut self.classifier.weight);
        if let Some(bias) = &mut self.classifier.bias {
            f(&join(prefix, "fc.bias"), bias);
        }
    }
}
