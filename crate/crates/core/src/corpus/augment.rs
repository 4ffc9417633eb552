use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Image, ImageShape};
use crate::error::{Error, Result};

/// Random crop (zero padding), horizontal flip and brightness jitter.
///
/// Draw order per augmentation is fixed: crop offsets, flip coin, jitter.
/// Disabled transforms consume no draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    /// Zero padding on each side before a random crop back to the input size.
    pub crop_padding: usize,
    pub hflip_prob: f64,
    /// Pixel values are scaled by a factor drawn from `[1 − j, 1 + j]`.
    pub brightness_jitter: f32,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            crop_padding: 4,
            hflip_prob: 0.5,
            brightness_jitter: 0.0,
        }
    }
}

impl AugPolicy {
    pub fn identity() -> Self {
        Self {
            crop_padding: 0,
            hflip_prob: 0.0,
            brightness_jitter: 0.0,
        }
    }

    pub fn flip_only(prob: f64) -> Self {
        Self {
            hflip_prob: prob,
            ..Self::identity()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.crop_padding == 0 && self.hflip_prob <= 0.0 && self.brightness_jitter <= 0.0
    }
}

/// Two independently augmented views of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: Image,
    pub view_b: Image,
    pub source_index: usize,
}

/// Applies an [`AugPolicy`] to images of a fixed input shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmenter {
    policy: AugPolicy,
    shape: ImageShape,
}

impl Augmenter {
    pub fn new(policy: AugPolicy, shape: ImageShape) -> Self {
        Self { policy, shape }
    }

    pub fn policy(&self) -> &AugPolicy {
        &self.policy
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    fn check(&self, image: &Image) -> Result<()> {
        if image.shape() != self.shape {
            return Err(Error::shape("augmentation input", self.shape, image.shape()));
        }
        Ok(())
    }

    /// One random augmentation of `image`.
    pub fn augment<R: Rng + ?Sized>(&self, image: &Image, rng: &mut R) -> Result<Image> {
        self.check(image)?;
        let ImageShape {
            height,
            width,
            channels,
        } = self.shape;
        let p = self.policy.crop_padding;
        let (oy, ox) = if p > 0 {
            (rng.gen_range(0..=2 * p), rng.gen_range(0..=2 * p))
        } else {
            (p, p)
        };
        let flip = self.policy.hflip_prob > 0.0 && rng.gen::<f64>() < self.policy.hflip_prob;
        let gain = if self.policy.brightness_jitter > 0.0 {
            let j = self.policy.brightness_jitter;
            1.0 + rng.gen_range(-j..=j)
        } else {
            1.0
        };

        let mut data = vec![0.0f32; self.shape.len()];
        for y in 0..height {
            let sy = (y + oy) as isize - p as isize;
            if sy < 0 || sy >= height as isize {
                continue;
            }
            for x in 0..width {
                let sx = (x + ox) as isize - p as isize;
                if sx < 0 || sx >= width as isize {
                    continue;
                }
                let dx = if flip { width - 1 - x } else { x };
                let src = (sy as usize * width + sx as usize) * channels;
                let dst = (y * width + dx) * channels;
                for c in 0..channels {
                    data[dst + c] = (image.data()[src + c] * gain).clamp(0.0, 1.0);
                }
            }
        }
        Image::new(self.shape, data)
    }

    /// Two views drawn one after the other from `rng`.
    pub fn view_pair<R: Rng + ?Sized>(
        &self,
        image: &Image,
        source_index: usize,
        rng: &mut R,
    ) -> Result<ViewPair> {
        Ok(ViewPair {
            view_a: self.augment(image, rng)?,
            view_b: self.augment(image, rng)?,
            source_index,
        })
    }
}
