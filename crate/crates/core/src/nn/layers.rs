//! Convolution, batch norm, linear and pooling layers with explicit backward
//! passes. Per-sample work is spread over [`crate::par`]; weight gradients are
//! reduced over fixed sample groups so results do not depend on thread count.

use rand::Rng;

use super::tensor::{Param, Tensor, Tensor4};
use crate::par;
use crate::rng::StreamRng;

/// Samples per weight-gradient reduction group.
const GRAD_GROUP: usize = 8;

/// Row-major `C = alpha·op(A)·op(B) + beta·C` with `op(A)` m×k and `op(B)` k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents asserted above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

/// Square-kernel 2-D convolution without bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-normal init (fan-out, ReLU gain).
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut StreamRng) -> Self {
        let std = (2.0 / (out_ch * kernel * kernel) as f32).sqrt();
        let mut w = Tensor::zeros(&[out_ch, in_ch, kernel, kernel]);
        w.data.iter_mut().for_each(|v| *v = std * normal(rng));
        Self {
            weight: Param::new(w),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32]) {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        for c in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, dx: &mut [f32]) {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        dx.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (c * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        debug_assert_eq!(x.c, self.in_ch);
        let (ho, wo) = self.out_hw(x.h, x.w);
        let mut out = Tensor4::zeros(x.n, self.out_ch, ho, wo);
        let rows = self.col_rows();
        let per_out = self.out_ch * ho * wo;
        if per_out == 0 {
            return out;
        }
        par::for_each_chunk_mut(&mut out.data, per_out, |i, y| {
            let xs = x.sample(i);
            if self.is_pointwise() {
                gemm(self.out_ch, rows, ho * wo, &self.weight.value.data, false, xs, false, y, 0.0);
            } else {
                let mut cols = vec![0.0f32; rows * ho * wo];
                self.im2col(xs, x.h, x.w, &mut cols);
                gemm(self.out_ch, rows, ho * wo, &self.weight.value.data, false, &cols, false, y, 0.0);
            }
        });
        out
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor4, dy: &Tensor4) -> Tensor4 {
        let (ho, wo) = (dy.h, dy.w);
        let rows = self.col_rows();
        let sample_in = x.sample_len();
        let groups = par::reduction_groups(x.n, GRAD_GROUP);
        let this = &*self;
        let partials = par::map_indexed(groups.len(), |g| {
            let mut dw = vec![0.0f32; this.out_ch * rows];
            let mut dx = vec![0.0f32; groups[g].len() * sample_in];
            let mut cols = vec![0.0f32; rows * ho * wo];
            let mut dcols = vec![0.0f32; rows * ho * wo];
            for (j, i) in groups[g].clone().enumerate() {
                let dys = dy.sample(i);
                let dxs = &mut dx[j * sample_in..(j + 1) * sample_in];
                if this.is_pointwise() {
                    gemm(this.out_ch, ho * wo, rows, dys, false, x.sample(i), true, &mut dw, 1.0);
                    gemm(rows, this.out_ch, ho * wo, &this.weight.value.data, true, dys, false, dxs, 0.0);
                } else {
                    this.im2col(x.sample(i), x.h, x.w, &mut cols);
                    gemm(this.out_ch, ho * wo, rows, dys, false, &cols, true, &mut dw, 1.0);
                    gemm(rows, this.out_ch, ho * wo, &this.weight.value.data, true, dys, false, &mut dcols, 0.0);
                    this.col2im(&dcols, x.h, x.w, dxs);
                }
            }
            (dw, dx)
        });
        let mut dx = Vec::with_capacity(x.data.len());
        for (dw, part) in partials {
            self.weight.grad.iter_mut().zip(&dw).for_each(|(g, d)| *g += d);
            dx.extend_from_slice(&part);
        }
        Tensor4 {
            n: x.n,
            c: x.c,
            h: x.h,
            w: x.w,
            data: dx,
        }
    }
}

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor4,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::filled(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Inference mode: normalizes with running statistics.
    pub fn forward_eval(&self, x: &Tensor4) -> Tensor4 {
        let mut y = x.clone();
        let plane = x.plane();
        for n in 0..x.n {
            for c in 0..x.c {
                let scale = self.gamma.value.data[c] / (self.running_var.data[c] + self.eps).sqrt();
                let shift = self.beta.value.data[c] - self.running_mean.data[c] * scale;
                let off = (n * x.c + c) * plane;
                y.data[off..off + plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    /// Training mode: batch statistics, updates running statistics.
    pub fn forward_train(&mut self, x: &Tensor4) -> (Tensor4, BnCache) {
        let c_count = self.channels();
        debug_assert_eq!(x.c, c_count);
        let plane = x.plane();
        let m = (x.n * plane) as f64;
        let mut mean = vec![0.0f64; c_count];
        let mut sq = vec![0.0f64; c_count];
        for n in 0..x.n {
            for c in 0..c_count {
                let off = (n * c_count + c) * plane;
                for &v in &x.data[off..off + plane] {
                    mean[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let mut inv_std = vec![0.0f32; c_count];
        for c in 0..c_count {
            mean[c] /= m;
            let var = (sq[c] / m - mean[c] * mean[c]).max(0.0);
            inv_std[c] = (1.0 / (var + self.eps as f64).sqrt()) as f32;
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let mo = self.momentum;
            self.running_mean.data[c] = (1.0 - mo) * self.running_mean.data[c] + mo * mean[c] as f32;
            self.running_var.data[c] = (1.0 - mo) * self.running_var.data[c] + mo * unbiased as f32;
        }
        let mut xhat = x.clone();
        let mut y = x.clone();
        for n in 0..x.n {
            for c in 0..c_count {
                let off = (n * c_count + c) * plane;
                let (mu, is) = (mean[c] as f32, inv_std[c]);
                let (g, b) = (self.gamma.value.data[c], self.beta.value.data[c]);
                for j in off..off + plane {
                    let h = (x.data[j] - mu) * is;
                    xhat.data[j] = h;
                    y.data[j] = g * h + b;
                }
            }
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor4) -> Tensor4 {
        let c_count = self.channels();
        let plane = dy.plane();
        let m = (dy.n * plane) as f32;
        let mut sum_dy = vec![0.0f64; c_count];
        let mut sum_dy_xhat = vec![0.0f64; c_count];
        for n in 0..dy.n {
            for c in 0..c_count {
                let off = (n * c_count + c) * plane;
                for j in off..off + plane {
                    sum_dy[c] += dy.data[j] as f64;
                    sum_dy_xhat[c] += (dy.data[j] * cache.xhat.data[j]) as f64;
                }
            }
        }
        for c in 0..c_count {
            self.gamma.grad[c] += sum_dy_xhat[c] as f32;
            self.beta.grad[c] += sum_dy[c] as f32;
        }
        let mut dx = dy.clone();
        for n in 0..dy.n {
            for c in 0..c_count {
                let off = (n * c_count + c) * plane;
                let k = self.gamma.value.data[c] * cache.inv_std[c] / m;
                let (sd, sdx) = (sum_dy[c] as f32, sum_dy_xhat[c] as f32);
                for j in off..off + plane {
                    dx.data[j] = k * (m * dy.data[j] - sd - cache.xhat.data[j] * sdx);
                }
            }
        }
        dx
    }
}

/// Fully connected layer on row-major `rows × in` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// PyTorch-style uniform init in `±1/√in`.
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut StreamRng) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let mut w = Tensor::zeros(&[out_dim, in_dim]);
        w.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        let bias = bias.then(|| {
            let mut b = Tensor::zeros(&[out_dim]);
            b.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            Param::new(b)
        });
        Self {
            weight: Param::new(w),
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let mut y = vec![0.0f32; rows * self.out_dim];
        if let Some(b) = &self.bias {
            for r in 0..rows {
                y[r * self.out_dim..(r + 1) * self.out_dim].copy_from_slice(&b.value.data);
            }
        }
        let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
        gemm(rows, self.in_dim, self.out_dim, x, false, &self.weight.value.data, true, &mut y, beta);
        y
    }

    pub fn backward(&mut self, x: &[f32], dy: &[f32], rows: usize) -> Vec<f32> {
        gemm(self.out_dim, rows, self.in_dim, dy, true, x, false, &mut self.weight.grad, 1.0);
        if let Some(b) = &mut self.bias {
            for r in 0..rows {
                for (g, d) in b.grad.iter_mut().zip(&dy[r * self.out_dim..(r + 1) * self.out_dim]) {
                    *g += d;
                }
            }
        }
        let mut dx = vec![0.0f32; rows * self.in_dim];
        gemm(rows, self.out_dim, self.in_dim, dy, false, &self.weight.value.data, false, &mut dx, 0.0);
        dx
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `dy` wherever the forward output was not positive.
pub fn relu_backward(out: &[f32], dy: &mut [f32]) {
    dy.iter_mut()
        .zip(out)
        .for_each(|(d, &o)| if o <= 0.0 { *d = 0.0 });
}

/// Global average pool: N×C×H×W → N×C rows.
pub fn avg_pool(x: &Tensor4) -> Vec<f32> {
    let plane = x.plane() as f32;
    x.data
        .chunks(x.plane())
        .map(|p| p.iter().sum::<f32>() / plane)
        .collect()
}

pub fn avg_pool_backward(dpooled: &[f32], n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    let plane = h * w;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for (chunk, &g) in dx.data.chunks_mut(plane).zip(dpooled) {
        chunk.iter_mut().for_each(|v| *v = g / plane as f32);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    /// Direct convolution oracle.
    fn conv_naive(conv: &Conv2d, x: &Tensor4) -> Tensor4 {
        let (ho, wo) = conv.out_hw(x.h, x.w);
        let mut out = Tensor4::zeros(x.n, conv.out_ch, ho, wo);
        let k = conv.kernel;
        for n in 0..x.n {
            for o in 0..conv.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f32;
                        for c in 0..conv.in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value.data[((o * conv.in_ch + c) * k + ky) * k + kx];
                                    acc += wv * x.data[((n * x.c + c) * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                        out.data[((n * conv.out_ch + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_t4(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
        let mut rng = stream(seed, Purpose::Init, 99, 0);
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor4::from_vec(n, c, h, w, data).unwrap()
    }

    #[test]
    fn conv_matches_direct_loop() {
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let conv = Conv2d::new(3, 4, k, s, p, &mut stream(1, Purpose::Init, 0, 0));
            let x = random_t4(2, 3, 6, 5, 4);
            let fast = conv.forward(&x);
            let slow = conv_naive(&conv, &x);
            assert!(fast.same_dims(&slow));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-4, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> is bilinear: its x- and w-gradients follow from linearity.
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 2, 0)] {
            let mut conv = Conv2d::new(2, 3, k, s, p, &mut stream(2, Purpose::Init, 0, 0));
            let x = random_t4(3, 2, 5, 6, 7);
            let y = conv.forward(&x);
            let dy = random_t4(y.n, y.c, y.h, y.w, 8);
            let dx = conv.backward(&x, &dy);
            let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(u, v)| (u * v) as f64).sum::<f64>();
            let lhs = dot(&y.data, &dy.data);
            assert!((lhs - dot(&x.data, &dx.data)).abs() < 1e-3 * lhs.abs().max(1.0));
            assert!((lhs - dot(&conv.weight.value.data, &conv.weight.grad)).abs() < 1e-3 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value.data = vec![1.3, 0.7];
        bn.beta.value.data = vec![0.1, -0.2];
        let x = random_t4(3, 2, 2, 2, 11);
        let dy = random_t4(3, 2, 2, 2, 12);
        let loss = |bn: &mut BatchNorm2d, x: &Tensor4| -> f64 {
            let (y, _) = bn.forward_train(x);
            y.data.iter().zip(&dy.data).map(|(a, b)| (a * b) as f64).sum()
        };
        let (_, cache) = bn.forward_train(&x);
        let dx = bn.backward(&cache, &dy);
        let eps = 1e-2f32;
        for j in [0, 5, 13, 22] {
            let mut xp = x.clone();
            xp.data[j] += eps;
            let mut xm = x.clone();
            xm.data[j] -= eps;
            let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * eps as f64);
            assert!((fd - dx.data[j] as f64).abs() < 2e-3, "{j}: {fd} vs {}", dx.data[j]);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean.data = vec![2.0];
        bn.running_var.data = vec![4.0];
        bn.eps = 0.0;
        let x = Tensor4::from_vec(1, 1, 1, 2, vec![2.0, 6.0]).unwrap();
        assert_eq!(bn.forward_eval(&x).data, vec![0.0, 2.0]);
    }

    #[test]
    fn linear_forward_backward() {
        let mut lin = Linear::new(3, 2, true, &mut stream(3, Purpose::Init, 0, 0));
        lin.weight.value.data = vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0];
        lin.bias.as_mut().unwrap().value.data = vec![0.5, -0.5];
        let x = vec![1.0, 1.0, 1.0, 0.0, 2.0, 0.0];
        assert_eq!(lin.forward(&x, 2), vec![6.5, -0.5, 4.5, -0.5]);
        let dx = lin.backward(&x, &[1.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(dx, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        assert_eq!(lin.weight.grad, vec![1.0, 1.0, 1.0, 0.0, 2.0, 0.0]);
        assert_eq!(lin.bias.as_ref().unwrap().grad, vec![1.0, 1.0]);
    }
}
