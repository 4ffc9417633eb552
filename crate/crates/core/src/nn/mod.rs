//! Tapped residual backbone, per-layer projection heads, EMA weights, SGD and
//! checkpoint files.

mod backbone;
pub mod checkpoint;
mod ema;
mod heads;
pub mod layers;
mod optim;
mod tensor;

pub use backbone::{BackboneSpec, ForwardOutput, Tape, TappedBackbone};
pub use ema::EmaState;
pub use heads::{ChannelBank, HeadSpec, ProjectionHead};
pub use optim::{Sgd, SgdConfig};
pub use tensor::{Param, StateDict, Tensor, Tensor4};

/// Anything holding trainable parameters.
pub trait Parameterized {
    /// Visits every parameter with its dotted name, in a fixed order.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
