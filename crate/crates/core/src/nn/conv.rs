//! Batched convolution primitives in channels-last layout (B, H, W, C).
//!
//! Convolutions are expressed as one GEMM per kernel offset, which keeps the
//! inner loops in `matrixmultiply` and the scatter/gather logic trivial.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rayon::prelude::*;
use std::borrow::Cow;

/// Standard-layout copy of a batched tensor, borrowing when already so.
fn standard4(x: &Array4<f64>) -> Cow<'_, Array4<f64>> {
    if x.is_standard_layout() {
        Cow::Borrowed(x)
    } else {
        Cow::Owned(x.as_standard_layout().into_owned())
    }
}

/// Stride-1 2D convolution. Kernel layout (kh, kw, c_in, c_out).
pub fn conv2d(input: &Array4<f64>, kernel: &Array4<f64>, bias: &Array1<f64>, pad: usize) -> Array4<f64> {
    let input = standard4(input);
    let input: &Array4<f64> = &input;
    let (b, h, w, _cin) = dims4(input);
    let (kh, kw, _, _cout) = dims4(kernel);
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let per_sample: Vec<Array3<f64>> = (0..b)
        .into_par_iter()
        .map(|bi| conv2d_single(&input.index_axis(Axis(0), bi), kernel, bias, pad, oh, ow))
        .collect();
    stack4(&per_sample)
}

fn conv2d_single(
    input: &ArrayView3<f64>,
    kernel: &Array4<f64>,
    bias: &Array1<f64>,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let (h, w, cin) = dims3(input);
    let (kh, kw, _, cout) = dims4(kernel);
    let mut out_flat = Array2::zeros((oh * ow, cout));
    for mut row in out_flat.rows_mut() {
        row += bias;
    }
    let mut gathered = Array2::zeros((oh * ow, cin));
    let in_flat = input.to_owned();
    let in_s = in_flat.as_slice().expect("standard layout");
    for ky in 0..kh {
        for kx in 0..kw {
            {
                let g = gathered.as_slice_mut().unwrap();
                g.fill(0.0);
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..ow {
                        let ix = ox + kx;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        let ix = ix - pad;
                        let src = (iy * w + ix) * cin;
                        let dst = (oy * ow + ox) * cin;
                        g[dst..dst + cin].copy_from_slice(&in_s[src..src + cin]);
                    }
                }
            }
            let kmat = kernel.slice(ndarray::s![ky, kx, .., ..]).to_owned();
            out_flat = out_flat + gathered.dot(&kmat);
        }
    }
    out_flat.into_shape_with_order((oh, ow, cout)).unwrap()
}

/// Backward pass of [`conv2d`]. Returns (d_input, d_kernel, d_bias).
pub fn conv2d_backward(
    input: &Array4<f64>,
    kernel: &Array4<f64>,
    d_out: &Array4<f64>,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let input = standard4(input);
    let input: &Array4<f64> = &input;
    let d_out = standard4(d_out);
    let d_out: &Array4<f64> = &d_out;
    let (b, h, w, cin) = dims4(input);
    let (kh, kw, _, cout) = dims4(kernel);
    let (_, oh, ow, _) = dims4(d_out);

    let parts: Vec<(Array3<f64>, Array4<f64>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let x = input.index_axis(Axis(0), bi);
            let dy = d_out.index_axis(Axis(0), bi);
            let dy_flat = dy
                .to_owned()
                .into_shape_with_order((oh * ow, cout))
                .unwrap();
            let mut dx = Array3::zeros((h, w, cin));
            let mut dk = Array4::zeros((kh, kw, cin, cout));
            let mut gathered = Array2::zeros((oh * ow, cin));
            let x_owned = x.to_owned();
            let x_s = x_owned.as_slice().expect("standard layout");
            for ky in 0..kh {
                for kx in 0..kw {
                    {
                        let g = gathered.as_slice_mut().unwrap();
                        g.fill(0.0);
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            for ox in 0..ow {
                                let ix = ox + kx;
                                if ix < pad || ix >= w + pad {
                                    continue;
                                }
                                let ix = ix - pad;
                                let src = (iy * w + ix) * cin;
                                let dst = (oy * ow + ox) * cin;
                                g[dst..dst + cin].copy_from_slice(&x_s[src..src + cin]);
                            }
                        }
                    }
                    // d_kernel[ky,kx] = gathered^T . dy
                    let dk_slice = gathered.t().dot(&dy_flat);
                    dk.slice_mut(ndarray::s![ky, kx, .., ..]).assign(&dk_slice);
                    // d_input scatter: dy . kernel[ky,kx]^T back to input cells
                    let kmat = kernel.slice(ndarray::s![ky, kx, .., ..]).to_owned();
                    let dxf = dy_flat.dot(&kmat.t());
                    let dxf_s = dxf.as_slice().unwrap();
                    let dx_s = dx.as_slice_mut().unwrap();
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        for ox in 0..ow {
                            let ix = ox + kx;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            let ix = ix - pad;
                            let dst = (iy * w + ix) * cin;
                            let src = (oy * ow + ox) * cin;
                            for ci in 0..cin {
                                dx_s[dst + ci] += dxf_s[src + ci];
                            }
                        }
                    }
                }
            }
            (dx, dk)
        })
        .collect();

    let mut d_input = Array4::zeros((b, h, w, cin));
    let mut d_kernel = Array4::zeros((kh, kw, cin, cout));
    for (bi, (dx, dk)) in parts.into_iter().enumerate() {
        d_input.index_axis_mut(Axis(0), bi).assign(&dx);
        d_kernel += &dk;
    }
    let mut d_bias = Array1::zeros(cout);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                d_bias += &d_out.slice(ndarray::s![bi, oy, ox, ..]);
            }
        }
    }
    (d_input, d_kernel, d_bias)
}

/// Transposed convolution, stride 2. Kernel layout (kh, kw, c_in, c_out).
/// Output side = 2 * input side for kh = 4, pad = 1.
pub fn deconv2d(
    input: &Array4<f64>,
    kernel: &Array4<f64>,
    bias: &Array1<f64>,
    pad: usize,
) -> Array4<f64> {
    let input = standard4(input);
    let input: &Array4<f64> = &input;
    let (b, h, w, _cin) = dims4(input);
    let (kh, kw, _, cout) = dims4(kernel);
    let oh = (h - 1) * 2 + kh - 2 * pad;
    let ow = (w - 1) * 2 + kw - 2 * pad;
    let per_sample: Vec<Array3<f64>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let x = input.index_axis(Axis(0), bi);
            let x_flat = x.to_owned().into_shape_with_order((h * w, x.shape()[2])).unwrap();
            let mut out = Array3::zeros((oh, ow, cout));
            for mut row in out.rows_mut() {
                row += bias;
            }
            for ky in 0..kh {
                for kx in 0..kw {
                    let kmat = kernel.slice(ndarray::s![ky, kx, .., ..]).to_owned();
                    let contrib = x_flat.dot(&kmat); // (h*w, cout)
                    let c_s = contrib.as_slice().unwrap();
                    let out_s = out.as_slice_mut().unwrap();
                    for iy in 0..h {
                        let oy = 2 * iy + ky;
                        if oy < pad || oy >= oh + pad {
                            continue;
                        }
                        let oy = oy - pad;
                        for ix in 0..w {
                            let ox = 2 * ix + kx;
                            if ox < pad || ox >= ow + pad {
                                continue;
                            }
                            let ox = ox - pad;
                            let dst = (oy * ow + ox) * cout;
                            let src = (iy * w + ix) * cout;
                            for ci in 0..cout {
                                out_s[dst + ci] += c_s[src + ci];
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    stack4(&per_sample)
}

/// Backward pass of [`deconv2d`]. Returns (d_input, d_kernel, d_bias).
pub fn deconv2d_backward(
    input: &Array4<f64>,
    kernel: &Array4<f64>,
    d_out: &Array4<f64>,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let input = standard4(input);
    let input: &Array4<f64> = &input;
    let d_out = standard4(d_out);
    let d_out: &Array4<f64> = &d_out;
    let (b, h, w, cin) = dims4(input);
    let (kh, kw, _, cout) = dims4(kernel);
    let (_, oh, ow, _) = dims4(d_out);

    let parts: Vec<(Array3<f64>, Array4<f64>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let x = input.index_axis(Axis(0), bi);
            let x_flat = x.to_owned().into_shape_with_order((h * w, cin)).unwrap();
            let dy = d_out.index_axis(Axis(0), bi);
            let mut dx_flat = Array2::zeros((h * w, cin));
            let mut dk = Array4::zeros((kh, kw, cin, cout));
            let mut gathered = Array2::zeros((h * w, cout));
            let dy_owned = dy.to_owned();
            let dy_s = dy_owned.as_slice().expect("standard layout");
            for ky in 0..kh {
                for kx in 0..kw {
                    {
                        let g = gathered.as_slice_mut().unwrap();
                        g.fill(0.0);
                        for iy in 0..h {
                            let oy = 2 * iy + ky;
                            if oy < pad || oy >= oh + pad {
                                continue;
                            }
                            let oy = oy - pad;
                            for ix in 0..w {
                                let ox = 2 * ix + kx;
                                if ox < pad || ox >= ow + pad {
                                    continue;
                                }
                                let ox = ox - pad;
                                let src = (oy * ow + ox) * cout;
                                let dst = (iy * w + ix) * cout;
                                g[dst..dst + cout].copy_from_slice(&dy_s[src..src + cout]);
                            }
                        }
                    }
                    let kmat = kernel.slice(ndarray::s![ky, kx, .., ..]).to_owned();
                    dx_flat = dx_flat + gathered.dot(&kmat.t());
                    let dk_slice = x_flat.t().dot(&gathered);
                    dk.slice_mut(ndarray::s![ky, kx, .., ..]).assign(&dk_slice);
                }
            }
            (dx_flat.into_shape_with_order((h, w, cin)).unwrap(), dk)
        })
        .collect();

    let mut d_input = Array4::zeros((b, h, w, cin));
    let mut d_kernel = Array4::zeros((kh, kw, cin, cout));
    for (bi, (dx, dk)) in parts.into_iter().enumerate() {
        d_input.index_axis_mut(Axis(0), bi).assign(&dx);
        d_kernel += &dk;
    }
    let mut d_bias = Array1::zeros(cout);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                d_bias += &d_out.slice(ndarray::s![bi, oy, ox, ..]);
            }
        }
    }
    (d_input, d_kernel, d_bias)
}

/// Per-channel batch normalization state.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Forward cache for the training-mode backward pass.
pub struct BatchNormCache {
    pub xhat: Array4<f64>,
    pub inv_std: Array1<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training-mode forward: normalize with batch statistics and update the
    /// running estimates.
    pub fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, BatchNormCache) {
        let x = standard4(x);
        let x: &Array4<f64> = &x;
        let (b, h, w, c) = dims4(x);
        let count = (b * h * w) as f64;
        let xs = x.as_slice().expect("standard layout");
        let mut mean = vec![0.0; c];
        for chunk in xs.chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(chunk) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        let mut var = vec![0.0; c];
        for chunk in xs.chunks_exact(c) {
            for ci in 0..c {
                let d = chunk[ci] - mean[ci];
                var[ci] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= count;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();

        let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ci in 0..c {
            self.running_mean[ci] =
                (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
            self.running_var[ci] =
                (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var[ci] * unbiased;
        }

        let mut xhat = Array4::zeros((b, h, w, c));
        let mut out = Array4::zeros((b, h, w, c));
        {
            let gamma = self.gamma.as_slice().unwrap();
            let beta = self.beta.as_slice().unwrap();
            let xh = xhat.as_slice_mut().unwrap();
            let os = out.as_slice_mut().unwrap();
            for (i, chunk) in xs.chunks_exact(c).enumerate() {
                let base = i * c;
                for ci in 0..c {
                    let v = (chunk[ci] - mean[ci]) * inv_std[ci];
                    xh[base + ci] = v;
                    os[base + ci] = gamma[ci] * v + beta[ci];
                }
            }
        }
        (out, BatchNormCache { xhat, inv_std: Array1::from_vec(inv_std) })
    }

    /// Evaluation-mode forward with running statistics; deterministic and
    /// independent of batch composition.
    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, h, w, c) = dims4(x);
        let mut out = Array4::zeros((b, h, w, c));
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|&v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let x = standard4(x);
        let x: &Array4<f64> = &x;
        let xs = x.as_slice().expect("standard layout");
        let os = out.as_slice_mut().unwrap();
        let gamma = self.gamma.as_slice().unwrap();
        let beta = self.beta.as_slice().unwrap();
        let mean = self.running_mean.as_slice().unwrap();
        for (i, chunk) in xs.chunks_exact(c).enumerate() {
            let base = i * c;
            for ci in 0..c {
                let xh = (chunk[ci] - mean[ci]) * inv_std[ci];
                os[base + ci] = gamma[ci] * xh + beta[ci];
            }
        }
        out
    }

    /// Training-mode backward. Returns (dx, dgamma, dbeta).
    pub fn backward(
        &self,
        cache: &BatchNormCache,
        d_out: &Array4<f64>,
    ) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
        let d_out = standard4(d_out);
        let d_out: &Array4<f64> = &d_out;
        let (b, h, w, c) = dims4(d_out);
        let count = (b * h * w) as f64;
        let dys = d_out.as_slice().expect("standard layout");
        let xhs = cache.xhat.as_slice().expect("standard layout");
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (dy_chunk, xh_chunk) in dys.chunks_exact(c).zip(xhs.chunks_exact(c)) {
            for ci in 0..c {
                dgamma[ci] += dy_chunk[ci] * xh_chunk[ci];
                dbeta[ci] += dy_chunk[ci];
            }
        }
        let mean_dy: Vec<f64> = dbeta.iter().map(|&v| v / count).collect();
        let mean_dy_xhat: Vec<f64> = dgamma.iter().map(|&v| v / count).collect();
        let mut dx = Array4::zeros((b, h, w, c));
        {
            let dxs = dx.as_slice_mut().unwrap();
            let gamma = self.gamma.as_slice().unwrap();
            let inv = cache.inv_std.as_slice().unwrap();
            for (i, (dy_chunk, xh_chunk)) in
                dys.chunks_exact(c).zip(xhs.chunks_exact(c)).enumerate()
            {
                let base = i * c;
                for ci in 0..c {
                    dxs[base + ci] = gamma[ci]
                        * inv[ci]
                        * (dy_chunk[ci] - mean_dy[ci] - xh_chunk[ci] * mean_dy_xhat[ci]);
                }
            }
        }
        (dx, Array1::from_vec(dgamma), Array1::from_vec(dbeta))
    }
}

/// Elementwise rectifier; returns output (the pre-activation is the cache).
pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through the rectifier given the cached pre-activation.
pub fn relu_backward(pre: &Array4<f64>, d_out: &Array4<f64>) -> Array4<f64> {
    let mut dx = d_out.clone();
    dx.zip_mut_with(pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// 2x2 max pooling, stride 2. Returns output and flat argmax offsets
/// (0..4 per output cell) for the backward scatter.
pub fn maxpool2(x: &Array4<f64>) -> (Array4<f64>, Array4<u8>) {
    let (b, h, w, c) = dims4(x);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros((b, oh, ow, c));
    let mut arg = Array4::zeros((b, oh, ow, c));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for k in 0..4u8 {
                        let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                        let v = x[[bi, 2 * oy + dy, 2 * ox + dx, ci]];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    out[[bi, oy, ox, ci]] = best;
                    arg[[bi, oy, ox, ci]] = best_k;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(d_out: &Array4<f64>, arg: &Array4<u8>, in_h: usize, in_w: usize) -> Array4<f64> {
    let (b, oh, ow, c) = dims4(d_out);
    let mut dx = Array4::zeros((b, in_h, in_w, c));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let k = arg[[bi, oy, ox, ci]];
                    let (dy, dxx) = ((k / 2) as usize, (k % 2) as usize);
                    dx[[bi, 2 * oy + dy, 2 * ox + dxx, ci]] += d_out[[bi, oy, ox, ci]];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (b, h, w, c) = dims4(x);
    let mut out = Array4::zeros((b, 2 * h, 2 * w, c));
    for bi in 0..b {
        for y in 0..2 * h {
            for xw in 0..2 * w {
                for ci in 0..c {
                    out[[bi, y, xw, ci]] = x[[bi, y / 2, xw / 2, ci]];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(d_out: &Array4<f64>) -> Array4<f64> {
    let (b, oh, ow, c) = dims4(d_out);
    let mut dx = Array4::zeros((b, oh / 2, ow / 2, c));
    for bi in 0..b {
        for y in 0..oh {
            for xw in 0..ow {
                for ci in 0..c {
                    dx[[bi, y / 2, xw / 2, ci]] += d_out[[bi, y, xw, ci]];
                }
            }
        }
    }
    dx
}

fn dims4<T>(a: &Array4<T>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

fn dims3<T>(a: &ArrayView3<T>) -> (usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2])
}

fn stack4(parts: &[Array3<f64>]) -> Array4<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).unwrap()
}
