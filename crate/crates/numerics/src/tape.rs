//! Reverse-mode gradient recording.
//!
//! Every value on the tape is a matrix. Vectors are 1×n rows. Parameters are
//! registered up front and receive gradients from [`GradRecord::backward`];
//! parameters that do not reach the loss get exact zeros.

use crate::error::{shape_err, NumericsError, Result};
use crate::ops::{
    self, check_heads, check_kernel, dwconv_raw, gelu, gelu_grad, log_softmax_slice,
    matmul_at_raw, matmul_bt_raw, softmax_slice, LN_EPS,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ScaleBy(Var, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    NormalizeRows(Var, Vec<f64>),
    DwConv {
        grid: Var,
        kernel: Var,
        r: usize,
        c: usize,
        k: usize,
    },
    Sum(Var),
    MeanRows(Var),
    Gather(Var, Vec<(usize, usize)>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

/// Ordered log of operations plus the parameter registry.
#[derive(Debug, Clone, Default)]
pub struct GradRecord {
    nodes: Vec<Node>,
    params: Vec<ParamEntry>,
}

/// Gradients aligned with the registration order of parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub names: Vec<String>,
    pub grads: Vec<Tensor>,
    vars: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.vars.iter().position(|v| *v == var).map(|i| &self.grads[i])
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.grads[i])
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.ndim() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        t.reshape(&[r, c]).unwrap()
    }
}

impl GradRecord {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Register a trainable parameter. Vectors are stored as 1×n.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(as_matrix(value), Op::Leaf, true);
        self.params.push(ParamEntry {
            name: name.to_string(),
            var: v,
            trainable: true,
        });
        v
    }

    /// Register a frozen parameter: it participates in the forward pass but
    /// its gradient is reported as zero and nothing flows into it.
    pub fn frozen(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(as_matrix(value), Op::Leaf, false);
        self.params.push(ParamEntry {
            name: name.to_string(),
            var: v,
            trainable: false,
        });
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(as_matrix(value), Op::Leaf, false)
    }

    pub fn params(&self) -> &[ParamEntry] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = f(*o, *y);
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Adds a 1×c row to every row of an r×c matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.dims(row) != (1, c) {
            return Err(shape_err("add_row", self.value(x).shape(), self.value(row).shape()));
        }
        let mut value = self.value(x).clone();
        let rv = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(&rv) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(value, Op::AddRow(x, row), ng))
    }

    /// Multiplies `x` by the 1×1 value `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(shape_err("scale_by", self.value(s).shape(), &[1, 1]));
        }
        let sv = self.value(s).data()[0];
        let value = self.value(x).map(|v| v * sv);
        let ng = self.ng(s) || self.ng(x);
        Ok(self.push(value, Op::ScaleBy(s, x), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, end)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SliceRows(x, start), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > c {
            return Err(shape_err("slice_cols", self.value(x).shape(), &[start, end]));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let value = Tensor::matrix(r, w, data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SliceCols(x, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::Usage("concat of nothing".into()))?;
        let c = self.dims(first).1;
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(shape_err("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            data.extend_from_slice(self.value(p).data());
            r += pr;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let value = Tensor::matrix(r, c, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::Usage("concat of nothing".into()))?;
        let r = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(shape_err("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let value = Tensor::matrix(r, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        let value = ops::softmax_rows(self.value(x), tau)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SoftmaxRows(x, tau), ng))
    }

    pub fn log_softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        let value = ops::log_softmax_rows(self.value(x), tau)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::LogSoftmaxRows(x, tau), ng))
    }

    /// Row-wise layer norm with 1×D gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, d) = self.dims(x);
        if self.dims(gain) != (1, d) || self.dims(bias) != (1, d) {
            return Err(shape_err("layer_norm", self.value(x).shape(), self.value(gain).shape()));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let src = self.value(x).data();
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let value = Tensor::matrix(r, d, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        let mut value = self.value(x).clone();
        let mut norms = Vec::new();
        for row in value.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(NumericsError::Degenerate("normalizing a zero row".into()));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let ng = self.ng(x);
        Ok(self.push(value, Op::NormalizeRows(x, norms), ng))
    }

    /// Depthwise convolution of an (R·C)×D token matrix viewed as an R×C
    /// grid, with a K²×D kernel matrix (row a·K+b holds tap (a, b)).
    pub fn dwconv(&mut self, grid: Var, kernel: Var, r: usize, c: usize) -> Result<Var> {
        let (n, d) = self.dims(grid);
        let (kk, dk) = self.dims(kernel);
        let k = (kk as f64).sqrt().round() as usize;
        if n != r * c || dk != d || k * k != kk {
            return Err(shape_err("dwconv", self.value(grid).shape(), self.value(kernel).shape()));
        }
        check_kernel(k)?;
        let out = dwconv_raw(self.value(grid).data(), self.value(kernel).data(), r, c, d, k);
        let ng = self.ng(grid) || self.ng(kernel);
        let value = Tensor::matrix(n, d, out)?;
        Ok(self.push(value, Op::DwConv { grid, kernel, r, c, k }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    /// Column means: r×c → 1×c.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.ng(x);
        self.push(Tensor::row_vector(out), Op::MeanRows(x), ng)
    }

    /// Picks the listed (row, col) entries into a 1×m row.
    pub fn gather(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.is_empty() || idx.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(NumericsError::Usage("gather index out of range".into()));
        }
        let t = self.value(x);
        let data: Vec<f64> = idx.iter().map(|&(i, j)| t.at(i, j)).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::row_vector(data), Op::Gather(x, idx.to_vec()), ng))
    }

    /// Multi-head attention built from recorded primitives.
    /// Inputs are token matrices; projections are D×D.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &mut self,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        heads: usize,
    ) -> Result<Var> {
        let d = self.dims(q_in).1;
        check_heads(d, heads)?;
        let q = self.matmul(q_in, wq)?;
        let k = self.matmul(k_in, wk)?;
        let v = self.matmul(v_in, wv)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.slice_cols(q, a, b)?,
                    self.slice_cols(k, a, b)?,
                    self.slice_cols(v, a, b)?,
                )
            };
            let kt = self.transpose(kh);
            let s = self.matmul(qh, kt)?;
            let s = self.scale(s, scale);
            let w = self.softmax_rows(s, 1.0)?;
            outs.push(self.matmul(w, vh)?);
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            self.concat_cols(&outs)?
        };
        self.matmul(cat, wo)
    }

    /// Reverse pass from a 1×1 loss. Returns one gradient per registered
    /// parameter, in registration order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut out = Gradients {
            names: Vec::new(),
            grads: Vec::new(),
            vars: Vec::new(),
        };
        for p in &self.params {
            let shape = self.value(p.var).shape().to_vec();
            let data = if p.trainable {
                grads[p.var.0]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; shape.iter().product()])
            } else {
                vec![0.0; shape.iter().product()]
            };
            out.names.push(p.name.clone());
            out.grads.push(Tensor::new(shape, data)?);
            out.vars.push(p.var);
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.ng(*a) {
                    let da = matmul_bt_raw(g, bv, m, n, k);
                    acc(*a, &|s| add_into(s, &da));
                }
                if self.ng(*b) {
                    let db = matmul_at_raw(av, g, m, k, n);
                    acc(*b, &|s| add_into(s, &db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                // g is c×r
                acc(*a, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(o, v)| *o += k * v)),
            Op::AddRow(x, row) => {
                let c = self.dims(*x).1;
                acc(*x, &|s| add_into(s, g));
                acc(*row, &|s| {
                    for chunk in g.chunks(c) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::ScaleBy(sv, x) => {
                let k = self.value(*sv).data()[0];
                let xv = self.value(*x).data();
                acc(*sv, &|s| s[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>());
                acc(*x, &|s| s.iter_mut().zip(g).for_each(|(o, v)| *o += k * v));
            }
            Op::SliceRows(x, start) => {
                let c = self.dims(*x).1;
                let off = start * c;
                acc(*x, &|s| add_into(&mut s[off..off + g.len()], g));
            }
            Op::SliceCols(x, start) => {
                let c = self.dims(*x).1;
                let w = node.value.cols();
                acc(*x, &|s| {
                    for (i, chunk) in g.chunks(w).enumerate() {
                        add_into(&mut s[i * c + start..i * c + start + w], chunk);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    let part = &g[off..off + n];
                    acc(*p, &|s| add_into(s, part));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let (r, w) = self.dims(*p);
                    acc(*p, &|s| {
                        for i in 0..r {
                            add_into(&mut s[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SoftmaxRows(x, tau) => {
                let c = node.value.cols();
                let y = node.value.data();
                acc(*x, &|s| {
                    for ((yr, gr), sr) in y.chunks(c).zip(g.chunks(c)).zip(s.chunks_mut(c)) {
                        let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            sr[j] += yr[j] * (gr[j] - dotp) / tau;
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x, tau) => {
                let c = node.value.cols();
                let xv = self.value(*x).data();
                acc(*x, &|s| {
                    let mut p = vec![0.0; c];
                    for ((xr, gr), sr) in xv.chunks(c).zip(g.chunks(c)).zip(s.chunks_mut(c)) {
                        softmax_slice(xr, *tau, &mut p);
                        let gs: f64 = gr.iter().sum();
                        for j in 0..c {
                            sr[j] += (gr[j] - p[j] * gs) / tau;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, d) = self.dims(*x);
                let gv = self.value(*gain).data();
                acc(*gain, &|s| {
                    for i in 0..r {
                        for j in 0..d {
                            s[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                acc(*bias, &|s| {
                    for chunk in g.chunks(d) {
                        add_into(s, chunk);
                    }
                });
                acc(*x, &|s| {
                    let df = d as f64;
                    for i in 0..r {
                        let gh: Vec<f64> = (0..d).map(|j| g[i * d + j] * gv[j]).collect();
                        let sum_g: f64 = gh.iter().sum();
                        let sum_gx: f64 = (0..d).map(|j| gh[j] * xhat[i * d + j]).sum();
                        for j in 0..d {
                            s[i * d + j] += inv_std[i] / df
                                * (df * gh[j] - sum_g - xhat[i * d + j] * sum_gx);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::NormalizeRows(x, norms) => {
                let c = node.value.cols();
                let y = node.value.data();
                acc(*x, &|s| {
                    for (i, ((yr, gr), sr)) in
                        y.chunks(c).zip(g.chunks(c)).zip(s.chunks_mut(c)).enumerate()
                    {
                        let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            sr[j] += (gr[j] - yr[j] * dotp) / norms[i];
                        }
                    }
                });
            }
            Op::DwConv {
                grid,
                kernel,
                r,
                c,
                k,
            } => {
                let (r, c, k) = (*r, *c, *k);
                let d = self.dims(*grid).1;
                let gv = self.value(*grid).data();
                let kv = self.value(*kernel).data();
                let p = (k / 2) as isize;
                let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for i in 0..r as isize {
                        for j in 0..c as isize {
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
                                    f(
                                        (i as usize * c + j as usize) * d,
                                        (si as usize * c + sj as usize) * d,
                                        (a as usize * k + b as usize) * d,
                                    );
                                }
                            }
                        }
                    }
                };
                acc(*grid, &|s| {
                    visit(&mut |o, src, kw| {
                        for ch in 0..d {
                            s[src + ch] += g[o + ch] * kv[kw + ch];
                        }
                    })
                });
                acc(*kernel, &|s| {
                    visit(&mut |o, src, kw| {
                        for ch in 0..d {
                            s[kw + ch] += g[o + ch] * gv[src + ch];
                        }
                    })
                });
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::MeanRows(x) => {
                let (r, c) = self.dims(*x);
                acc(*x, &|s| {
                    for chunk in s.chunks_mut(c) {
                        for j in 0..c {
                            chunk[j] += g[j] / r as f64;
                        }
                    }
                });
            }
            Op::Gather(x, idx) => {
                let c = self.dims(*x).1;
                acc(*x, &|s| {
                    for (t, &(i, j)) in idx.iter().enumerate() {
                        s[i * c + j] += g[t];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Log-softmax of a plain slice; kept here so callers outside the tape can
/// share the exact same arithmetic.
pub fn log_softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    log_softmax_slice(x, tau, &mut out);
    out
}
