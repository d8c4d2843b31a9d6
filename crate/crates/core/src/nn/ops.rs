//! Small differentiable building blocks shared by the transformer nets.

use ndarray::{Array1, Array2, ArrayView2};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Gaussian-error linear unit, tanh form.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Exact derivative of the tanh-form [`gelu`].
pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward through a row-wise softmax: `ds = p * (dp - sum(dp * p))`.
pub fn softmax_rows_backward(probs: &ArrayView2<f64>, dprobs: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((mut orow, prow), dprow) in out
        .rows_mut()
        .into_iter()
        .zip(probs.rows())
        .zip(dprobs.rows())
    {
        let dot: f64 = prow.iter().zip(dprow.iter()).map(|(&p, &d)| p * d).sum();
        for ((o, &p), &d) in orow.iter_mut().zip(prow.iter()).zip(dprow.iter()) {
            *o = p * (d - dot);
        }
    }
    out
}

pub const LN_EPS: f64 = 1e-6;

/// Per-row layer normalization. Returns (output, xhat, inv_std).
pub fn layer_norm(
    x: &ArrayView2<f64>,
    scale: &Array1<f64>,
    offset: &Array1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let (m, d) = (x.shape()[0], x.shape()[1]);
    let mut out = Array2::zeros((m, d));
    let mut xhat = Array2::zeros((m, d));
    let mut inv_std = Array1::zeros(m);
    let scale = scale.as_slice().unwrap();
    let offset = offset.as_slice().unwrap();
    let x = if x.is_standard_layout() {
        x.reborrow()
    } else {
        return layer_norm(&x.to_owned().view(), &Array1::from_vec(scale.to_vec()), &Array1::from_vec(offset.to_vec()));
    };
    for i in 0..m {
        let row = x.row(i);
        let row = row.as_slice().expect("standard layout");
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean /= d as f64;
        let mut var = 0.0;
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var /= d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        let xh_row = &mut xhat.as_slice_mut().unwrap()[i * d..(i + 1) * d];
        for (j, &v) in row.iter().enumerate() {
            xh_row[j] = (v - mean) * inv;
        }
        let out_row = &mut out.as_slice_mut().unwrap()[i * d..(i + 1) * d];
        let xh_row = &xhat.as_slice().unwrap()[i * d..(i + 1) * d];
        for j in 0..d {
            out_row[j] = scale[j] * xh_row[j] + offset[j];
        }
    }
    (out, xhat, inv_std)
}

/// Backward through layer normalization.
/// Returns (dx, dscale, doffset).
pub fn layer_norm_backward(
    dy: &ArrayView2<f64>,
    xhat: &ArrayView2<f64>,
    inv_std: &Array1<f64>,
    scale: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (m, d) = (dy.shape()[0], dy.shape()[1]);
    let mut dx = Array2::zeros((m, d));
    let mut dscale = Array1::zeros(d);
    let mut doffset = Array1::zeros(d);
    let scale_s = scale.as_slice().unwrap();
    let dscale_s = dscale.as_slice_mut().unwrap();
    let doffset_s = doffset.as_slice_mut().unwrap();
    let dx_s = dx.as_slice_mut().unwrap();
    for i in 0..m {
        let dy_row = dy.row(i);
        let dy_row = dy_row.as_slice().expect("contiguous rows");
        let xh_row = xhat.row(i);
        let xh_row = xh_row.as_slice().expect("contiguous rows");
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dscale_s[j] += dy_row[j] * xh_row[j];
            doffset_s[j] += dy_row[j];
            let dxh = dy_row[j] * scale_s[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh_row[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let inv = inv_std[i];
        let dx_row = &mut dx_s[i * d..(i + 1) * d];
        for j in 0..d {
            let dxh = dy_row[j] * scale_s[j];
            dx_row[j] = inv * (dxh - mean_dxhat - xh_row[j] * mean_dxhat_xhat);
        }
    }
    (dx, dscale, doffset)
}

/// `x @ w + b` for row-major token matrices.
pub fn linear(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = x.dot(w);
    let d = b.len();
    let bs = b.as_slice().unwrap();
    let os = out.as_slice_mut().expect("dot output is standard layout");
    for chunk in os.chunks_exact_mut(d) {
        for (o, &bv) in chunk.iter_mut().zip(bs) {
            *o += bv;
        }
    }
    out
}

/// Backward through [`linear`]. Returns (dx, dw, db).
pub fn linear_backward(
    x: &ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(ndarray::Axis(0));
    (dx, dw, db)
}
