use capt_numerics::binio::{ByteReader, ByteWriter, FormatError};
use capt_numerics::ops::{depthwise_conv2d, layer_norm, multi_head_attention, AttentionParams};
use capt_numerics::{normalized, softmax_vec, GradRecord, Gradients, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Result, SampleError};

/// Which tokens query the global branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    /// Every token queries; patch rows of the attention output feed the conv.
    FullSequence,
    /// Only CLS queries the patches; the conv runs on the normed patches.
    ClsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterTrainable {
    pub norm: bool,
    pub attention: bool,
    pub kernel: bool,
}

impl Default for AdapterTrainable {
    fn default() -> Self {
        Self {
            norm: true,
            attention: true,
            kernel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub heads: usize,
    pub kernel_size: usize,
    pub grid: (usize, usize),
    pub mode: QueryMode,
    pub trainable: AdapterTrainable,
    /// 1×D
    pub ln_gain: Tensor,
    /// 1×D
    pub ln_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// K²×D, row a·K+b is tap (a, b).
    pub kernel: Tensor,
}

/// Tape handles in [`AdapterParams::tensors`] order.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub kernel: Var,
}

impl AdapterVars {
    pub fn all(&self) -> [Var; 7] {
        [self.ln_gain, self.ln_bias, self.wq, self.wk, self.wv, self.wo, self.kernel]
    }
}

pub const ADAPTER_TENSORS: [&str; 7] = ["ln_gain", "ln_bias", "wq", "wk", "wv", "wo", "kernel"];

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let n = Normal::new(0.0, std).unwrap();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).unwrap()
}

impl AdapterParams {
    /// Random q/k/v projections and kernel; zero output projection so the
    /// adapter starts as the identity on CLS.
    pub fn new(d: usize, heads: usize, kernel_size: usize, grid: (usize, usize), seed: u64) -> Result<Self> {
        let mut p = Self::random(d, heads, kernel_size, grid, seed)?;
        p.wo = Tensor::zeros(&[d, d]);
        Ok(p)
    }

    /// Every weight random (used by gradient checks).
    pub fn random(d: usize, heads: usize, kernel_size: usize, grid: (usize, usize), seed: u64) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(SampleError::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if kernel_size % 2 == 0 {
            return Err(SampleError::Config(format!("kernel size {kernel_size} must be odd")));
        }
        if grid.0 == 0 || grid.1 == 0 {
            return Err(SampleError::Config("empty patch grid".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d as f64).sqrt();
        Ok(Self {
            heads,
            kernel_size,
            grid,
            mode: QueryMode::FullSequence,
            trainable: AdapterTrainable::default(),
            ln_gain: Tensor::filled(&[1, d], 1.0),
            ln_bias: Tensor::zeros(&[1, d]),
            wq: gaussian(&mut rng, d, d, s),
            wk: gaussian(&mut rng, d, d, s),
            wv: gaussian(&mut rng, d, d, s),
            wo: gaussian(&mut rng, d, d, s),
            kernel: gaussian(&mut rng, kernel_size * kernel_size, d, 1.0 / kernel_size as f64),
        })
    }

    pub fn width(&self) -> usize {
        self.wq.rows()
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn tensors(&self) -> [&Tensor; 7] {
        [&self.ln_gain, &self.ln_bias, &self.wq, &self.wk, &self.wv, &self.wo, &self.kernel]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.ln_gain,
            &mut self.ln_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.kernel,
        ]
    }

    fn group_trainable(&self, i: usize) -> bool {
        match i {
            0 | 1 => self.trainable.norm,
            2..=5 => self.trainable.attention,
            _ => self.trainable.kernel,
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers the parameters; frozen groups go in as frozen leaves.
    pub fn register(&self, rec: &mut GradRecord, prefix: &str) -> AdapterVars {
        let mut v = Vec::with_capacity(7);
        for (i, t) in self.tensors().into_iter().enumerate() {
            let name = format!("{prefix}{}", ADAPTER_TENSORS[i]);
            v.push(if self.group_trainable(i) {
                rec.param(&name, t.clone())
            } else {
                rec.frozen(&name, t.clone())
            });
        }
        AdapterVars {
            ln_gain: v[0],
            ln_bias: v[1],
            wq: v[2],
            wk: v[3],
            wv: v[4],
            wo: v[5],
            kernel: v[6],
        }
    }

    /// Plain gradient step on trainable groups.
    pub fn sgd_step(&mut self, vars: &AdapterVars, grads: &Gradients, lr: f64) {
        let handles = vars.all();
        let flags: Vec<bool> = (0..7).map(|i| self.group_trainable(i)).collect();
        for (i, t) in self.tensors_mut().into_iter().enumerate() {
            if !flags[i] {
                continue;
            }
            if let Some(g) = grads.get(handles[i]) {
                for (p, g) in t.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * g;
                }
            }
        }
    }

    fn check_tokens(&self, tokens: &Tensor) -> Result<()> {
        let n = self.num_patches();
        if tokens.ndim() != 2 || tokens.rows() != n + 1 || tokens.cols() != self.width() {
            return Err(SampleError::Config(format!(
                "token matrix {:?} does not match a {}x{} grid plus CLS at width {}",
                tokens.shape(),
                self.grid.0,
                self.grid.1,
                self.width()
            )));
        }
        Ok(())
    }

    fn attention(&self) -> AttentionParams {
        AttentionParams {
            heads: self.heads,
            wq: self.wq.clone(),
            wk: self.wk.clone(),
            wv: self.wv.clone(),
            wo: self.wo.clone(),
        }
    }

    fn conv(&self, patches: &Tensor) -> Result<Tensor> {
        let (r, c, d, k) = (self.grid.0, self.grid.1, self.width(), self.kernel_size);
        let g = patches.reshape(&[r, c, d])?;
        let kern = self.kernel.reshape(&[k, k, d])?;
        Ok(depthwise_conv2d(&g, &kern)?.reshape(&[r * c, d])?)
    }

    /// Global attention branch plus α-weighted local conv on the patches.
    /// Output has the input's shape; CLS gets only the attention residual.
    pub fn forward(&self, tokens: &Tensor, alpha: f64) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let n = tokens.rows();
        let d = self.width();
        let x = layer_norm(tokens, self.ln_gain.data(), self.ln_bias.data())?;
        let att = self.attention();
        let (cls_att, local_src) = match self.mode {
            QueryMode::FullSequence => {
                let xh = multi_head_attention(&x, &x, &x, &att)?;
                (xh.row(0).to_vec(), xh.slice_rows(1, n)?)
            }
            QueryMode::ClsOnly => {
                let xp = x.slice_rows(1, n)?;
                let xh = multi_head_attention(&x.slice_rows(0, 1)?, &xp, &xp, &att)?;
                (xh.row(0).to_vec(), xp)
            }
        };
        let conv = self.conv(&local_src)?;
        let mut out = tokens.clone();
        for (o, a) in out.row_mut(0).iter_mut().zip(&cls_att) {
            *o += a;
        }
        for i in 1..n {
            let src = conv.row(i - 1);
            for (j, o) in out.row_mut(i).iter_mut().enumerate().take(d) {
                *o += alpha * src[j];
            }
        }
        Ok(out)
    }

    /// CLS row of [`forward`](Self::forward), computed with a single query.
    pub fn cls_readout(&self, tokens: &Tensor) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let n = tokens.rows();
        let x = layer_norm(tokens, self.ln_gain.data(), self.ln_bias.data())?;
        let q = x.slice_rows(0, 1)?;
        let kv = match self.mode {
            QueryMode::FullSequence => x,
            QueryMode::ClsOnly => x.slice_rows(1, n)?,
        };
        let a = multi_head_attention(&q, &kv, &kv, &self.attention())?;
        Ok(tokens.row(0).iter().zip(a.row(0)).map(|(t, a)| t + a).collect())
    }

    pub fn forward_tape(&self, rec: &mut GradRecord, vars: &AdapterVars, tokens: Var, alpha: f64) -> Result<Var> {
        self.check_tokens(rec.value(tokens))?;
        let n = rec.value(tokens).rows();
        let x = rec.layer_norm(tokens, vars.ln_gain, vars.ln_bias)?;
        let (cls_att, local_src) = match self.mode {
            QueryMode::FullSequence => {
                let xh = rec.multi_head_attention(x, x, x, vars.wq, vars.wk, vars.wv, vars.wo, self.heads)?;
                (rec.slice_rows(xh, 0, 1)?, rec.slice_rows(xh, 1, n)?)
            }
            QueryMode::ClsOnly => {
                let q = rec.slice_rows(x, 0, 1)?;
                let xp = rec.slice_rows(x, 1, n)?;
                let xh = rec.multi_head_attention(q, xp, xp, vars.wq, vars.wk, vars.wv, vars.wo, self.heads)?;
                (xh, xp)
            }
        };
        let conv = rec.dwconv(local_src, vars.kernel, self.grid.0, self.grid.1)?;
        let conv = rec.scale(conv, alpha);
        let cls_in = rec.slice_rows(tokens, 0, 1)?;
        let patches_in = rec.slice_rows(tokens, 1, n)?;
        let cls = rec.add(cls_in, cls_att)?;
        let patches = rec.add(patches_in, conv)?;
        Ok(rec.concat_rows(&[cls, patches])?)
    }

    /// 1×D CLS row on the tape.
    pub fn cls_readout_tape(&self, rec: &mut GradRecord, vars: &AdapterVars, tokens: Var) -> Result<Var> {
        self.check_tokens(rec.value(tokens))?;
        let n = rec.value(tokens).rows();
        let x = rec.layer_norm(tokens, vars.ln_gain, vars.ln_bias)?;
        let q = rec.slice_rows(x, 0, 1)?;
        let kv = match self.mode {
            QueryMode::FullSequence => x,
            QueryMode::ClsOnly => rec.slice_rows(x, 1, n)?,
        };
        let a = rec.multi_head_attention(q, kv, kv, vars.wq, vars.wk, vars.wv, vars.wo, self.heads)?;
        let cls_in = rec.slice_rows(tokens, 0, 1)?;
        Ok(rec.add(cls_in, a)?)
    }

    pub fn write(&self, w: &mut ByteWriter) {
        w.u64(self.heads as u64);
        w.u64(self.kernel_size as u64);
        w.u64(self.grid.0 as u64);
        w.u64(self.grid.1 as u64);
        w.u8(match self.mode {
            QueryMode::FullSequence => 0,
            QueryMode::ClsOnly => 1,
        });
        w.u8(self.trainable.norm as u8);
        w.u8(self.trainable.attention as u8);
        w.u8(self.trainable.kernel as u8);
        for t in self.tensors() {
            w.tensor(t);
        }
    }

    pub fn read(r: &mut ByteReader) -> std::result::Result<Self, FormatError> {
        let heads = r.usize()?;
        let kernel_size = r.usize()?;
        let grid = (r.usize()?, r.usize()?);
        let mode = match r.u8()? {
            0 => QueryMode::FullSequence,
            1 => QueryMode::ClsOnly,
            m => return Err(r.error(format!("unknown query mode {m}"))),
        };
        let mut flag = || -> std::result::Result<bool, FormatError> {
            match r.u8()? {
                0 => Ok(false),
                1 => Ok(true),
                b => Err(r.error(format!("bad flag byte {b}"))),
            }
        };
        let trainable = AdapterTrainable {
            norm: flag()?,
            attention: flag()?,
            kernel: flag()?,
        };
        let mut ts = Vec::with_capacity(7);
        for _ in 0..7 {
            ts.push(r.tensor()?);
        }
        let d = ts[2].rows();
        let shapes_ok = heads > 0
            && d > 0
            && d % heads == 0
            && kernel_size % 2 == 1
            && ts[0].shape() == [1, d]
            && ts[1].shape() == [1, d]
            && ts[2..6].iter().all(|t| t.shape() == [d, d])
            && ts[6].shape() == [kernel_size * kernel_size, d]
            && grid.0 > 0
            && grid.1 > 0;
        if !shapes_ok {
            return Err(r.error("inconsistent adapter shapes"));
        }
        let mut it = ts.into_iter();
        let mut next = || it.next().unwrap();
        Ok(Self {
            heads,
            kernel_size,
            grid,
            mode,
            trainable,
            ln_gain: next(),
            ln_bias: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            kernel: next(),
        })
    }
}

/// softmax(c, τ=1) fusion weights.
pub fn fusion_weights(intensities: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax_vec(intensities, 1.0)?)
}

/// normalize(inst + Σ wᵢ·repᵢ)
pub fn fuse(instance: &[f64], reps: &[Vec<f64>], intensities: &[f64]) -> Result<Vec<f64>> {
    if reps.is_empty() || reps.len() != intensities.len() {
        return Err(SampleError::Contract(format!(
            "fusion needs one intensity per representative, got {} reps and {} intensities",
            reps.len(),
            intensities.len()
        )));
    }
    let w = fusion_weights(intensities)?;
    let mut f = instance.to_vec();
    for (r, wi) in reps.iter().zip(&w) {
        for (o, v) in f.iter_mut().zip(r) {
            *o += wi * v;
        }
    }
    Ok(normalized(&f))
}

pub fn fuse_tape(rec: &mut GradRecord, instance: Var, reps: &[Var], intensities: &[f64]) -> Result<Var> {
    if reps.is_empty() || reps.len() != intensities.len() {
        return Err(SampleError::Contract("fusion needs one intensity per representative".into()));
    }
    let w = fusion_weights(intensities)?;
    let mut acc = instance;
    for (&r, &wi) in reps.iter().zip(&w) {
        let s = rec.scale(r, wi);
        acc = rec.add(acc, s)?;
    }
    Ok(rec.normalize_rows(acc)?)
}
