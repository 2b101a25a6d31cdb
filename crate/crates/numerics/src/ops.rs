//! Forward-only kernels. The tape in [`crate::tape`] reuses these for its
//! forward values and supplies the matching backward rules.

use crate::error::{shape_err, NumericsError, Result};
use crate::tensor::{dot, l2_norm, Tensor};

pub const LN_EPS: f64 = 1e-5;

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(shape_err(op, t.shape(), &[]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    Ok(Tensor::matrix(m, n, matmul_raw(a.data(), b.data(), m, k, n)).unwrap())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a · bᵀ without materializing the transpose.
pub(crate) fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// aᵀ · b where a is k×m and b is k×n.
pub(crate) fn matmul_at_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(NumericsError::Parameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

pub(crate) fn softmax_slice(x: &[f64], tau: f64, out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = ((v - m) / tau).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

pub(crate) fn log_softmax_slice(x: &[f64], tau: f64, out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| ((v - m) / tau).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m) / tau - lse;
    }
}

/// Softmax over all entries of `x` at temperature `tau`.
pub fn softmax(x: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let mut out = x.clone();
    softmax_slice(x.data(), tau, out.data_mut());
    Ok(out)
}

pub fn softmax_vec(x: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if x.is_empty() {
        return Err(NumericsError::Parameter("softmax of empty vector".into()));
    }
    let mut out = vec![0.0; x.len()];
    softmax_slice(x, tau, &mut out);
    Ok(out)
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(x: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let (_, c) = require_2d("softmax_rows", x)?;
    let mut out = x.clone();
    for (src, dst) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        softmax_slice(src, tau, dst);
    }
    Ok(out)
}

pub fn log_softmax_rows(x: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let (_, c) = require_2d("log_softmax_rows", x)?;
    let mut out = x.clone();
    for (src, dst) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        log_softmax_slice(src, tau, dst);
    }
    Ok(out)
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(shape_err("cosine_similarity", &[u.len()], &[v.len()]));
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(NumericsError::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Per-row normalization followed by `gain`/`bias` (each of length D).
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64]) -> Result<Tensor> {
    let (_, d) = require_2d("layer_norm", x)?;
    if gain.len() != d || bias.len() != d {
        return Err(shape_err("layer_norm", x.shape(), &[gain.len(), bias.len()]));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[j] + bias[j];
        }
    }
    Ok(out)
}

pub(crate) fn check_kernel(k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(NumericsError::Config(format!(
            "depthwise kernel size must be odd, got {k}"
        )));
    }
    Ok(())
}

/// Depthwise 2-D convolution with zero same-padding over raw buffers.
/// `grid` is R·C·D (row-major cells, channel fastest), `kern` is K·K·D.
pub(crate) fn dwconv_raw(grid: &[f64], kern: &[f64], r: usize, c: usize, d: usize, k: usize) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = vec![0.0; r * c * d];
    for i in 0..r as isize {
        for j in 0..c as isize {
            let o = &mut out[((i as usize) * c + j as usize) * d..][..d];
            for a in 0..k as isize {
                let si = i + a - p;
                if si < 0 || si >= r as isize {
                    continue;
                }
                for b in 0..k as isize {
                    let sj = j + b - p;
                    if sj < 0 || sj >= c as isize {
                        continue;
                    }
                    let src = &grid[((si as usize) * c + sj as usize) * d..][..d];
                    let kw = &kern[((a as usize) * k + b as usize) * d..][..d];
                    for ch in 0..d {
                        o[ch] += src[ch] * kw[ch];
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_conv2d(grid: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    if grid.ndim() != 3 || kernels.ndim() != 3 {
        return Err(shape_err("depthwise_conv2d", grid.shape(), kernels.shape()));
    }
    let (r, c, d) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let (k, k2, dk) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]);
    if k != k2 || dk != d {
        return Err(shape_err("depthwise_conv2d", grid.shape(), kernels.shape()));
    }
    check_kernel(k)?;
    Tensor::new(
        vec![r, c, d],
        dwconv_raw(grid.data(), kernels.data(), r, c, d, k),
    )
}

/// Projection weights of a multi-head attention block, each D×D.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttentionParams {
    pub fn identity(d: usize, heads: usize) -> Self {
        Self {
            heads,
            wq: Tensor::identity(d),
            wk: Tensor::identity(d),
            wv: Tensor::identity(d),
            wo: Tensor::identity(d),
        }
    }
}

pub(crate) fn check_heads(d: usize, h: usize) -> Result<()> {
    if h == 0 || d % h != 0 {
        return Err(NumericsError::Config(format!(
            "model width {d} not divisible by {h} heads"
        )));
    }
    Ok(())
}

pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    params: &AttentionParams,
) -> Result<Tensor> {
    let (nq, d) = require_2d("multi_head_attention", q)?;
    let (nk, dk) = require_2d("multi_head_attention", k)?;
    let (nv, dv) = require_2d("multi_head_attention", v)?;
    if dk != d || dv != d || nv != nk {
        return Err(shape_err("multi_head_attention", q.shape(), k.shape()));
    }
    check_heads(d, params.heads)?;
    let qp = matmul(q, &params.wq)?;
    let kp = matmul(k, &params.wk)?;
    let vp = matmul(v, &params.wv)?;
    let dh = d / params.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = vec![0.0; nq * d];
    let mut scores = vec![0.0; nk];
    let mut weights = vec![0.0; nk];
    for h in 0..params.heads {
        let off = h * dh;
        for i in 0..nq {
            let qi = &qp.row(i)[off..off + dh];
            for j in 0..nk {
                scores[j] = dot(qi, &kp.row(j)[off..off + dh]) * scale;
            }
            softmax_slice(&scores, 1.0, &mut weights);
            let o = &mut concat[i * d + off..i * d + off + dh];
            for j in 0..nk {
                let vj = &vp.row(j)[off..off + dh];
                for t in 0..dh {
                    o[t] += weights[j] * vj[t];
                }
            }
        }
    }
    matmul(&Tensor::matrix(nq, d, concat)?, &params.wo)
}

/// The `k` largest entries in descending order, ties to the lower index.
pub fn top_k(x: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > x.len() {
        return Err(NumericsError::Parameter(format!(
            "top_k needs 1 <= k <= n, got k={k}, n={}",
            x.len()
        )));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(NumericsError::Parameter("top_k input contains NaN".into()));
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap().then(a.cmp(&b)));
    Ok(idx.into_iter().take(k).map(|i| (i, x[i])).collect())
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
