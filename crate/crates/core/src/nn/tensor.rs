use crate::corpus::{Image, ImageShape};
use crate::error::{Error, Result};

/// A dense f32 tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Named tensors in a fixed visiting order: parameters plus buffers such as
/// batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateDict {
    pub entries: Vec<(String, Tensor)>,
}

impl StateDict {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks names and shapes against `other`.
    pub fn check_compatible(&self, other: &StateDict, context: &'static str) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::shape(
                context,
                format!("{} tensors", self.entries.len()),
                format!("{} tensors", other.entries.len()),
            ));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape != tb.shape {
                return Err(Error::shape(
                    context,
                    format!("{na} {:?}", ta.shape),
                    format!("{nb} {:?}", tb.shape),
                ));
            }
        }
        Ok(())
    }
}

/// A batch of feature maps, N×C×H×W, contiguous per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape("tensor4 buffer", n * c * h * w, data.len()));
        }
        Ok(Self { n, c, h, w, data })
    }

    /// Stacks images (H×W×C) into an N×C×H×W batch.
    pub fn from_images<'a, I>(images: I, expected: ImageShape) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Image>,
    {
        let sample = expected.len();
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            if img.shape() != expected {
                return Err(Error::shape("model input", expected, img.shape()));
            }
            data.resize(data.len() + sample, 0.0);
            img.write_chw(&mut data[n * sample..]);
            n += 1;
        }
        Ok(Self {
            n,
            c: expected.channels,
            h: expected.height,
            w: expected.width,
            data,
        })
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn same_dims(&self, other: &Tensor4) -> bool {
        self.dims() == other.dims()
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        debug_assert!(self.same_dims(other));
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}
