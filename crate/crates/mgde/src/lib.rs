//! Multi-granularity discrepancy experts: two semantic experts seeded from
//! clustered prompt embeddings, one sample expert seeded from the frozen
//! projection, and a top-K softmax router.

use capt_numerics::binio::{ByteReader, ByteWriter, FormatError};
use capt_numerics::ops::{gelu, matmul, softmax_vec, top_k};
use capt_numerics::{kmeans, normalized, GradRecord, Gradients, KMeansResult, NumericsError, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

pub const NUM_EXPERTS: usize = 3;
const KMEANS_ITERS: usize = 100;

#[derive(Debug, Error)]
pub enum MgdeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error(transparent)]
    Numerics(NumericsError),
}

impl From<NumericsError> for MgdeError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::Parameter(m) => MgdeError::Parameter(m),
            other => MgdeError::Numerics(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, MgdeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertRole {
    Commonality,
    Difference,
    Sample,
}

impl ExpertRole {
    pub const ALL: [ExpertRole; NUM_EXPERTS] = [ExpertRole::Commonality, ExpertRole::Difference, ExpertRole::Sample];

    pub fn name(self) -> &'static str {
        match self {
            ExpertRole::Commonality => "commonality",
            ExpertRole::Difference => "difference",
            ExpertRole::Sample => "sample",
        }
    }
}

/// Clustered prompt centroids and the learnable projection w into the
/// expert input space. The first k hidden rows are `centroids · proj`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptHead {
    /// k×d, fixed after clustering.
    pub centroids: Tensor,
    /// d×D
    pub proj: Tensor,
}

/// Two-layer feed-forward expert, D → H → D, row-vector convention:
/// y = gelu(x·W1ᵀ + b1)·W2 + b2.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub role: ExpertRole,
    pub head: Option<PromptHead>,
    /// Free first-layer rows: (H−k)×D with a head, H×D without.
    pub w1: Tensor,
    /// 1×H
    pub b1: Tensor,
    /// H×D
    pub w2: Tensor,
    /// 1×D
    pub b2: Tensor,
}

impl ExpertParams {
    pub fn hidden(&self) -> usize {
        self.b1.cols()
    }

    pub fn width(&self) -> usize {
        self.b2.cols()
    }

    /// Full H×D first layer.
    pub fn effective_w1(&self) -> Result<Tensor> {
        match &self.head {
            None => Ok(self.w1.clone()),
            Some(h) => {
                let top = matmul(&h.centroids, &h.proj)?;
                let mut rows: Vec<Vec<f64>> = (0..top.rows()).map(|i| top.row(i).to_vec()).collect();
                rows.extend((0..self.w1.rows()).map(|i| self.w1.row(i).to_vec()));
                Ok(Tensor::from_rows(&rows)?)
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let w1 = self.effective_w1()?;
        let h: Vec<f64> = (0..self.hidden())
            .map(|j| gelu(w1.row(j).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b1.data()[j]))
            .collect();
        let mut y = self.b2.data().to_vec();
        for (j, hj) in h.iter().enumerate() {
            for (o, w) in y.iter_mut().zip(self.w2.row(j)) {
                *o += hj * w;
            }
        }
        Ok(y)
    }

    /// Trainable tensors in registration order: [proj], w1, b1, w2, b2.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        if let Some(h) = &self.head {
            v.push(&h.proj);
        }
        v.extend([&self.w1, &self.b1, &self.w2, &self.b2]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        if let Some(h) = &mut self.head {
            v.push(&mut h.proj);
        }
        v.extend([&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]);
        v
    }

    pub fn tensor_names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.head.is_some() {
            v.push("proj");
        }
        v.extend(["w1", "b1", "w2", "b2"]);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    /// D×E
    pub wr: Tensor,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgdeParams {
    pub experts: [ExpertParams; NUM_EXPERTS],
    pub router: RouterParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MgdeConfig {
    /// Prompt clusters per semantic expert.
    pub clusters: usize,
    pub hidden: usize,
    pub top_k: usize,
    /// Std of the second layers is `w2_scale / √H`; 0 starts every expert
    /// at a zero output.
    pub w2_scale: f64,
    pub seed: u64,
}

impl Default for MgdeConfig {
    fn default() -> Self {
        Self {
            clusters: 4,
            hidden: 64,
            top_k: 2,
            w2_scale: 0.0,
            seed: 0,
        }
    }
}

/// Per-call routing outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct GateReport {
    pub logits: Vec<f64>,
    /// (expert, gate) for the selected experts, best first.
    pub selected: Vec<(usize, f64)>,
}

impl GateReport {
    pub fn gate_sum(&self) -> f64 {
        self.selected.iter().map(|s| s.1).sum()
    }
}

/// k-means over the prompt rows, centroids mapped through `proj`:
/// f_e = centroids · w.
pub fn compress_prompts(prompts: &Tensor, k: usize, proj: &Tensor, seed: u64) -> Result<(Tensor, KMeansResult)> {
    if k > prompts.rows() {
        return Err(MgdeError::Parameter(format!(
            "{k} clusters requested from {} prompts",
            prompts.rows()
        )));
    }
    if proj.rows() != prompts.cols() {
        return Err(MgdeError::Config(format!(
            "projection has {} rows for {}-dim prompts",
            proj.rows(),
            prompts.cols()
        )));
    }
    let km = kmeans(prompts, k, KMEANS_ITERS, seed)?;
    Ok((matmul(&km.centroids, proj)?, km))
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    if std == 0.0 {
        return Tensor::zeros(&[rows, cols]);
    }
    let n = Normal::new(0.0, std).unwrap();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).unwrap()
}

/// Builds the three experts and the router.
///
/// `projection` is the frozen d×D image projection: it seeds the prompt
/// projections of the semantic experts and the first d hidden rows of the
/// sample expert.
pub fn init_experts(
    projection: &Tensor,
    commonality_pool: &[Vec<f64>],
    difference_pool: &[Vec<f64>],
    cfg: &MgdeConfig,
) -> Result<MgdeParams> {
    let dim = projection.cols();
    let h = cfg.hidden;
    if cfg.top_k == 0 || cfg.top_k > NUM_EXPERTS {
        return Err(MgdeError::Config(format!("top-K must be in 1..=3, got {}", cfg.top_k)));
    }
    if cfg.clusters == 0 || h <= cfg.clusters {
        return Err(MgdeError::Config(format!(
            "hidden width {h} must exceed the {} centroid rows",
            cfg.clusters
        )));
    }
    let mut pools = Vec::with_capacity(2);
    for (name, pool) in [("commonality", commonality_pool), ("difference", difference_pool)] {
        if pool.is_empty() {
            return Err(MgdeError::Config(format!("missing {name} prompt pool")));
        }
        if pool.iter().any(|r| r.len() != projection.rows()) {
            return Err(MgdeError::Config(format!(
                "{name} prompts must have width {}",
                projection.rows()
            )));
        }
        pools.push(Tensor::from_rows(pool)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s1 = 1.0 / (dim as f64).sqrt();
    let s2 = cfg.w2_scale / (h as f64).sqrt();
    let mut semantic = |role, pool: &Tensor, salt: u64| -> Result<ExpertParams> {
        let (_, km) = compress_prompts(pool, cfg.clusters, projection, cfg.seed ^ salt)?;
        Ok(ExpertParams {
            role,
            head: Some(PromptHead {
                centroids: km.centroids,
                proj: projection.clone(),
            }),
            w1: gaussian(&mut rng, h - cfg.clusters, dim, s1),
            b1: Tensor::zeros(&[1, h]),
            w2: gaussian(&mut rng, h, dim, s2),
            b2: Tensor::zeros(&[1, dim]),
        })
    };
    let common = semantic(ExpertRole::Commonality, &pools[0], 0x11)?;
    let diff = semantic(ExpertRole::Difference, &pools[1], 0x22)?;
    let mut w1 = gaussian(&mut rng, h, dim, s1);
    for i in 0..projection.rows().min(h) {
        w1.row_mut(i).copy_from_slice(projection.row(i));
    }
    let sample = ExpertParams {
        role: ExpertRole::Sample,
        head: None,
        w1,
        b1: Tensor::zeros(&[1, h]),
        w2: gaussian(&mut rng, h, dim, s2),
        b2: Tensor::zeros(&[1, dim]),
    };
    let router = RouterParams {
        wr: gaussian(&mut rng, dim, NUM_EXPERTS, s1),
        top_k: cfg.top_k,
    };
    Ok(MgdeParams {
        experts: [common, diff, sample],
        router,
    })
}

/// Replacement inputs drawn for one training step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskDraw {
    /// Indexed by expert; `Some(v)` replaces that expert's input with v.
    pub inputs: [Option<Vec<f64>>; NUM_EXPERTS],
}

impl MaskDraw {
    pub fn masked(&self) -> Vec<usize> {
        (0..NUM_EXPERTS).filter(|&e| self.inputs[e].is_some()).collect()
    }
}

/// Independently per activated expert, with probability `p_mask`, a fresh
/// unit-norm random input of width `dim`. `p_mask = 0` draws nothing.
pub fn mask_training_step<R: Rng>(dim: usize, activated: &[usize], p_mask: f64, rng: &mut R) -> Result<MaskDraw> {
    if !(0.0..=1.0).contains(&p_mask) {
        return Err(MgdeError::Config(format!("p_mask {p_mask} outside [0, 1]")));
    }
    let mut out = MaskDraw::default();
    if p_mask == 0.0 {
        return Ok(out);
    }
    for &e in activated {
        if e >= NUM_EXPERTS {
            return Err(MgdeError::Config(format!("no expert {e}")));
        }
        if rng.random::<f64>() < p_mask {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            out.inputs[e] = Some(normalized(&v));
        }
    }
    Ok(out)
}

/// Selected experts and their gates for a logit row.
fn gates_for(logits: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    let top = top_k(logits, k)?;
    let vals: Vec<f64> = top.iter().map(|t| t.1).collect();
    let g = softmax_vec(&vals, 1.0)?;
    Ok(top.iter().zip(g).map(|(t, g)| (t.0, g)).collect())
}

impl MgdeParams {
    pub fn width(&self) -> usize {
        self.router.wr.rows()
    }

    pub fn logits(&self, f: &[f64]) -> Vec<f64> {
        let wr = &self.router.wr;
        (0..NUM_EXPERTS)
            .map(|e| (0..f.len()).map(|i| f[i] * wr.at(i, e)).sum())
            .collect()
    }

    /// Σ gate_i · Exp_i(f) over the top-K experts.
    pub fn route_and_fuse(&self, f: &[f64]) -> Result<(Vec<f64>, GateReport)> {
        self.route_and_fuse_masked(f, None)
    }

    pub fn route_and_fuse_masked(&self, f: &[f64], mask: Option<&MaskDraw>) -> Result<(Vec<f64>, GateReport)> {
        if f.len() != self.width() {
            return Err(MgdeError::Config(format!("input width {} vs {}", f.len(), self.width())));
        }
        let logits = self.logits(f);
        let selected = gates_for(&logits, self.router.top_k)?;
        let mut out = vec![0.0; f.len()];
        for &(e, g) in &selected {
            let input = mask.and_then(|m| m.inputs[e].as_deref()).unwrap_or(f);
            let y = self.experts[e].forward(input)?;
            for (o, v) in out.iter_mut().zip(&y) {
                *o += g * v;
            }
        }
        Ok((out, GateReport { logits, selected }))
    }

    pub fn num_params(&self) -> usize {
        self.router.wr.len()
            + self
                .experts
                .iter()
                .map(|e| e.tensors().iter().map(|t| t.len()).sum::<usize>())
                .sum::<usize>()
    }

    /// Registers router then experts. Centroids enter as constants.
    pub fn register(&self, rec: &mut GradRecord, prefix: &str) -> Result<MgdeVars> {
        let wr = rec.param(&format!("{prefix}router.wr"), self.router.wr.clone());
        let mut experts = Vec::with_capacity(NUM_EXPERTS);
        for ex in &self.experts {
            let role = ex.role.name();
            let mut params = Vec::new();
            for (t, n) in ex.tensors().into_iter().zip(ex.tensor_names()) {
                params.push(rec.param(&format!("{prefix}{role}.{n}"), t.clone()));
            }
            let (proj, rest) = if ex.head.is_some() {
                (Some(params[0]), &params[1..])
            } else {
                (None, &params[..])
            };
            let w1_eff = match (&ex.head, proj) {
                (Some(h), Some(p)) => {
                    let c = rec.constant(h.centroids.clone());
                    let top = rec.matmul(c, p)?;
                    rec.concat_rows(&[top, rest[0]])?
                }
                _ => rest[0],
            };
            let w1t = rec.transpose(w1_eff);
            experts.push(ExpertVars {
                proj,
                w1: rest[0],
                b1: rest[1],
                w2: rest[2],
                b2: rest[3],
                w1t,
            });
        }
        let experts: [ExpertVars; NUM_EXPERTS] = experts.try_into().unwrap();
        Ok(MgdeVars { wr, experts })
    }

    /// Tape version of [`route_and_fuse_masked`](Self::route_and_fuse_masked)
    /// for a 1×D row. Unselected experts are never touched.
    pub fn route_and_fuse_tape(
        &self,
        rec: &mut GradRecord,
        vars: &MgdeVars,
        f: Var,
        mask: Option<&MaskDraw>,
    ) -> Result<(Var, GateReport)> {
        let lg = rec.matmul(f, vars.wr)?;
        let logits = rec.value(lg).data().to_vec();
        let top = top_k(&logits, self.router.top_k)?;
        let idx: Vec<(usize, usize)> = top.iter().map(|t| (0, t.0)).collect();
        let sel = rec.gather(lg, &idx)?;
        let gates = rec.softmax_rows(sel, 1.0)?;
        let gate_vals = rec.value(gates).data().to_vec();
        let mut acc: Option<Var> = None;
        for (j, &(e, _)) in top.iter().enumerate() {
            let input = match mask.and_then(|m| m.inputs[e].as_ref()) {
                Some(v) => rec.constant(Tensor::row_vector(v.clone())),
                None => f,
            };
            let ev = &vars.experts[e];
            let a = rec.matmul(input, ev.w1t)?;
            let a = rec.add(a, ev.b1)?;
            let hdn = rec.gelu(a);
            let y = rec.matmul(hdn, ev.w2)?;
            let y = rec.add(y, ev.b2)?;
            let g = if top.len() == 1 { gates } else { rec.slice_cols(gates, j, j + 1)? };
            let term = rec.scale_by(g, y)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => rec.add(prev, term)?,
            });
        }
        let selected = top.iter().zip(gate_vals).map(|(t, g)| (t.0, g)).collect();
        Ok((acc.unwrap(), GateReport { logits, selected }))
    }

    pub fn sgd_step(&mut self, vars: &MgdeVars, grads: &Gradients, lr: f64) {
        apply(&mut self.router.wr, grads.get(vars.wr), lr);
        for (ex, ev) in self.experts.iter_mut().zip(&vars.experts) {
            let handles = ev.trainable();
            for (t, v) in ex.tensors_mut().into_iter().zip(handles) {
                apply(t, grads.get(v), lr);
            }
        }
    }

    pub fn write(&self, w: &mut ByteWriter) {
        w.u64(self.router.top_k as u64);
        w.tensor(&self.router.wr);
        for ex in &self.experts {
            w.u8(ex.role as u8);
            match &ex.head {
                None => w.u8(0),
                Some(h) => {
                    w.u8(1);
                    w.tensor(&h.centroids);
                    w.tensor(&h.proj);
                }
            }
            for t in [&ex.w1, &ex.b1, &ex.w2, &ex.b2] {
                w.tensor(t);
            }
        }
    }

    pub fn read(r: &mut ByteReader) -> std::result::Result<Self, FormatError> {
        let top_k = r.usize()?;
        let wr = r.tensor()?;
        if wr.ndim() != 2 || wr.cols() != NUM_EXPERTS || !(1..=NUM_EXPERTS).contains(&top_k) {
            return Err(r.error("bad router"));
        }
        let dim = wr.rows();
        let mut experts = Vec::with_capacity(NUM_EXPERTS);
        for expected in ExpertRole::ALL {
            if r.u8()? != expected as u8 {
                return Err(r.error("unexpected expert role"));
            }
            let head = match r.u8()? {
                0 => None,
                1 => Some(PromptHead {
                    centroids: r.tensor()?,
                    proj: r.tensor()?,
                }),
                b => return Err(r.error(format!("bad head flag {b}"))),
            };
            let (w1, b1, w2, b2) = (r.tensor()?, r.tensor()?, r.tensor()?, r.tensor()?);
            let h = b1.cols();
            let k = head.as_ref().map_or(0, |hd| hd.centroids.rows());
            let head_ok = head.as_ref().is_none_or(|hd| {
                hd.centroids.ndim() == 2
                    && hd.proj.ndim() == 2
                    && hd.centroids.cols() == hd.proj.rows()
                    && hd.proj.cols() == dim
            });
            let ok = head_ok
                && b1.shape() == [1, h]
                && w1.shape() == [h.saturating_sub(k), dim]
                && k <= h
                && w2.shape() == [h, dim]
                && b2.shape() == [1, dim];
            if !ok {
                return Err(r.error("inconsistent expert shapes"));
            }
            experts.push(ExpertParams {
                role: expected,
                head,
                w1,
                b1,
                w2,
                b2,
            });
        }
        Ok(Self {
            experts: experts.try_into().unwrap(),
            router: RouterParams { wr, top_k },
        })
    }
}

fn apply(t: &mut Tensor, g: Option<&Tensor>, lr: f64) {
    if let Some(g) = g {
        for (p, g) in t.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * g;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub proj: Option<Var>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    /// Transposed effective first layer (derived).
    pub w1t: Var,
}

impl ExpertVars {
    pub fn trainable(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.proj.into_iter().collect();
        v.extend([self.w1, self.b1, self.w2, self.b2]);
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MgdeVars {
    pub wr: Var,
    pub experts: [ExpertVars; NUM_EXPERTS],
}
