//! Dense kernels used by the encoder. Each returns an error instead of a
//! non-finite result.

use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn mat_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.matrix_dims()
        .ok_or_else(|| Error::shape(op, t.shape(), &[]))
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = mat_dims(a, "matmul")?;
    let (k2, n) = mat_dims(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let out = matmul_raw(a.data(), b.data(), m, k, n);
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul")
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = mat_dims(a, "matmul_bt")?;
    let (n, k2) = mat_dims(b, "matmul_bt")?;
    if k != k2 {
        return Err(Error::shape("matmul_bt", a.shape(), b.shape()));
    }
    let out = matmul_bt_raw(a.data(), b.data(), m, k, n);
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul_bt")
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = mat_dims(a, "matmul_at")?;
    let (k2, n) = mat_dims(b, "matmul_at")?;
    if k != k2 {
        return Err(Error::shape("matmul_at", a.shape(), b.shape()));
    }
    let out = matmul_at_raw(a.data(), b.data(), k, m, n);
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul_at")
}

// Row-wise accumulation over the inner index in ascending order; the sparse
// engine relies on this summation order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub(crate) fn matmul_at_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Standard normal CDF, exact erf form.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.map(gelu_scalar).ensure_finite("gelu")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Saved statistics of a layer-norm forward pass, needed for its backward.
#[derive(Clone, Debug)]
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layernorm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let h = x.last_dim();
    if gain.shape() != [h] || bias.shape() != [h] {
        return Err(Error::shape("layernorm", x.shape(), gain.shape()));
    }
    let rows = x.rows();
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    let g = gain.data();
    let b = bias.data();
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let denom = (var + eps).sqrt();
        // Zero variance with eps = 0: the centred row is all zeros, so emit zeros.
        let is = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        inv_std[r] = is;
        for j in 0..h {
            let xh = (row[j] - mean) * is;
            xhat[r * h + j] = xh;
            out[r * h + j] = g[j] * xh + b[j];
        }
    }
    let y = Tensor::new(x.shape().to_vec(), out)?.ensure_finite("layernorm")?;
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layernorm_forward(x, gain, bias, eps).map(|(y, _)| y)
}

/// Returns (dx, dgain, dbias).
pub(crate) fn layernorm_backward(
    dy: &[f64],
    gain: &[f64],
    cache: &LayerNormCache,
    h: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = cache.inv_std.len();
    let mut dx = vec![0.0; rows * h];
    let mut dg = vec![0.0; h];
    let mut db = vec![0.0; h];
    let mut dxhat = vec![0.0; h];
    for r in 0..rows {
        let dyr = &dy[r * h..(r + 1) * h];
        let xh = &cache.xhat[r * h..(r + 1) * h];
        for j in 0..h {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / h as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / h as f64;
        let is = cache.inv_std[r];
        for j in 0..h {
            dx[r * h + j] = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (dx, dg, db)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax over the last axis, stabilised by subtracting the row max.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let c = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out.ensure_finite("softmax_rows")
}

/// Inverted-dropout keep mask already scaled by `1/(1-rate)`.
pub(crate) fn dropout_scale_mask(len: usize, rate: f64, rng: &mut RngStream) -> Vec<f64> {
    let scale = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.uniform() < rate { 0.0 } else { scale })
        .collect()
}

/// Inverted dropout. Identity when `training` is false or `rate` is zero.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut RngStream, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::OutOfRange(format!("dropout rate {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_scale_mask(x.len(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
    Tensor::new(x.shape().to_vec(), data)?.ensure_finite("dropout")
}
