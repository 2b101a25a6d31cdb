//! Deterministic desk-scale world: category prototypes with planted
//! confusable pairs, token-sequence samples, a frozen image encoder
//! (orthogonal mix + tanh + projection) and a frozen hashed-token text
//! encoder.

pub mod text;

use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use capt_numerics::binio::{ByteReader, ByteWriter, FormatError};
use capt_numerics::{argmax, l2_norm, normalized, softmax_vec, NumericsError, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const WORLD_MAGIC: &[u8; 8] = b"CAPTWRLD";
pub const WORLD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
}

pub type Result<T> = std::result::Result<T, WorldError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub num_categories: usize,
    pub num_confusable_pairs: usize,
    /// Radians between paired prototypes.
    pub pair_angle: f64,
    pub within_class_noise: f64,
    pub samples_per_category: usize,
    pub base_fraction: f64,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub seed: u64,
    /// Std of the [CLS]-only nuisance along a pair's separating axis, in
    /// units of `within_class_noise`.
    pub cls_pair_jitter: f64,
    /// Std of the noise shared by all tokens of a sample, relative to
    /// `within_class_noise`.
    pub shared_noise: f64,
    pub position_scale: f64,
    /// Gain of the frozen projection along encoded pair axes.
    pub pair_stretch: f64,
    pub text_hash_dim: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_categories: 32,
            num_confusable_pairs: 8,
            pair_angle: 0.15,
            within_class_noise: 0.3,
            samples_per_category: 50,
            base_fraction: 0.75,
            feature_dim: 32,
            embed_dim: 32,
            patch_rows: 4,
            patch_cols: 4,
            seed: 0,
            cls_pair_jitter: 1.5,
            shared_noise: 1.0 / 6.0,
            position_scale: 0.1,
            pair_stretch: 3.5,
            text_hash_dim: 64,
        }
    }
}

impl WorldSpec {
    pub fn num_patches(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WorldError::Config(m));
        if self.num_categories < 2 {
            return bad("need at least 2 categories".into());
        }
        if 2 * self.num_confusable_pairs > self.num_categories {
            return bad(format!(
                "{} pairs need {} categories, have {}",
                self.num_confusable_pairs,
                2 * self.num_confusable_pairs,
                self.num_categories
            ));
        }
        if !(self.pair_angle > 0.0 && self.pair_angle <= FRAC_PI_2 + 1e-12) {
            return bad(format!("pair_angle {} outside (0, pi/2]", self.pair_angle));
        }
        if !(self.within_class_noise >= 0.0) || !(self.shared_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.cls_pair_jitter >= 0.0) || !(self.position_scale >= 0.0) {
            return bad("jitter and position scale must be non-negative".into());
        }
        if !(self.pair_stretch > 0.0) {
            return bad("pair_stretch must be positive".into());
        }
        if self.samples_per_category < 2 {
            return bad("need at least 2 samples per category (train and test)".into());
        }
        if !(self.base_fraction > 0.0 && self.base_fraction <= 1.0) {
            return bad(format!("base_fraction {} outside (0, 1]", self.base_fraction));
        }
        if self.feature_dim < self.num_categories {
            return bad(format!(
                "feature_dim {} < num_categories {}: prototypes cannot be orthogonalized",
                self.feature_dim, self.num_categories
            ));
        }
        if self.embed_dim == 0 || self.embed_dim > self.feature_dim {
            return bad("embed_dim must be in 1..=feature_dim".into());
        }
        if self.patch_rows == 0 || self.patch_cols == 0 {
            return bad("patch grid must be non-empty".into());
        }
        if self.text_hash_dim < self.num_categories {
            return bad("text_hash_dim must be >= num_categories".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    /// Raw (pre-encoder) tokens, [CLS] first: (N+1)×D.
    pub tokens: Tensor,
    pub train: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub names: Vec<String>,
    pub prototypes: Tensor,
    pub pairs: Vec<(usize, usize)>,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
    /// Frozen encoder mix, D×D orthogonal.
    pub mix: Tensor,
    /// Frozen image projection, d×D.
    pub projection: Tensor,
    /// Frozen text projection, d×H.
    pub text_projection: Tensor,
    pub samples: Vec<Sample>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Orthonormalizes the rows in place (classical Gram-Schmidt with one
/// re-orthogonalization pass).
pub fn gram_schmidt(rows: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..rows.len() {
        for _ in 0..2 {
            for j in 0..i {
                let p: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let rj = rows[j].clone();
                for (a, b) in rows[i].iter_mut().zip(rj) {
                    *a -= p * b;
                }
            }
        }
        let n = l2_norm(&rows[i]);
        if n < 1e-10 {
            return Err(WorldError::Config("Gram-Schmidt hit a dependent vector".into()));
        }
        rows[i].iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

fn random_orthonormal(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| gaussian(rng)).collect()).collect();
    gram_schmidt(&mut rows)?;
    Ok(rows)
}

fn mat_vec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| m.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let (nc, d, e) = (spec.num_categories, spec.feature_dim, spec.embed_dim);
    let n_patch = spec.num_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut perm: Vec<usize> = (0..nc).collect();
    perm.shuffle(&mut rng);
    let pairs: Vec<(usize, usize)> = (0..spec.num_confusable_pairs)
        .map(|i| (perm[2 * i], perm[2 * i + 1]))
        .collect();

    let mut protos = random_orthonormal(&mut rng, nc, d)?;
    let (cth, sth) = (spec.pair_angle.cos(), spec.pair_angle.sin());
    for &(a, b) in &pairs {
        let pa = protos[a].clone();
        for (j, v) in protos[b].iter_mut().enumerate() {
            *v = cth * pa[j] + sth * *v;
        }
    }
    let mut axis = vec![vec![0.0; d]; nc];
    for &(a, b) in &pairs {
        let diff: Vec<f64> = protos[a].iter().zip(&protos[b]).map(|(x, y)| x - y).collect();
        let u = normalized(&diff);
        axis[a] = u.clone();
        axis[b] = u.iter().map(|v| -v).collect();
    }

    // base/novel split over units so a pair never straddles the split
    let paired: BTreeSet<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let mut units: Vec<Vec<usize>> = pairs.iter().map(|&(a, b)| vec![a, b]).collect();
    units.extend(perm[2 * spec.num_confusable_pairs..].iter().map(|&c| vec![c]));
    units.shuffle(&mut rng);
    let n_novel = nc - (spec.base_fraction * nc as f64).round() as usize;
    let mut novel = Vec::new();
    for u in &units {
        if novel.len() + u.len() <= n_novel {
            novel.extend(u.iter().copied());
        }
    }
    novel.sort_unstable();
    let base: Vec<usize> = (0..nc).filter(|c| !novel.contains(c)).collect();

    let mix = Tensor::from_rows(&random_orthonormal(&mut rng, d, d)?)?;
    let outer = Tensor::from_rows(&random_orthonormal(&mut rng, e, d)?)?;
    let mut pos: Vec<Vec<f64>> = (0..n_patch)
        .map(|_| (0..d).map(|_| gaussian(&mut rng) * spec.position_scale).collect())
        .collect();
    for j in 0..d {
        let m = pos.iter().map(|p| p[j]).sum::<f64>() / n_patch as f64;
        pos.iter_mut().for_each(|p| p[j] -= m);
    }

    let encode = |x: &[f64]| -> Vec<f64> { mat_vec(&mix, x).into_iter().map(f64::tanh).collect() };
    let enc_protos: Vec<Vec<f64>> = protos.iter().map(|p| encode(p)).collect();
    let mut stretch = Tensor::identity(d);
    for &(a, b) in &pairs {
        let diff: Vec<f64> = enc_protos[a].iter().zip(&enc_protos[b]).map(|(x, y)| x - y).collect();
        let u = normalized(&diff);
        for i in 0..d {
            for j in 0..d {
                let v = stretch.at(i, j) + (spec.pair_stretch - 1.0) * u[i] * u[j];
                stretch.set(i, j, v);
            }
        }
    }
    let projection = capt_numerics::matmul(&outer, &stretch)?;

    let names: Vec<String> = (0..nc).map(text::category_name).collect();
    let targets: Vec<Vec<f64>> = enc_protos.iter().map(|p| normalized(&mat_vec(&projection, p))).collect();
    let text_projection = fit_text_projection(&names, &targets, spec.text_hash_dim)?;

    let sigma = spec.within_class_noise;
    let mut samples = Vec::with_capacity(nc * spec.samples_per_category);
    for c in 0..nc {
        for s in 0..spec.samples_per_category {
            let z: Vec<f64> = protos[c].iter().map(|p| p + sigma * spec.shared_noise * gaussian(&mut rng)).collect();
            let g = gaussian(&mut rng);
            let jitter = if paired.contains(&c) { spec.cls_pair_jitter * sigma * g } else { 0.0 };
            let mut data = Vec::with_capacity((n_patch + 1) * d);
            data.extend(z.iter().zip(&axis[c]).map(|(v, a)| v + jitter * a));
            for p in &pos {
                for j in 0..d {
                    data.push(z[j] + sigma * gaussian(&mut rng) + p[j]);
                }
            }
            samples.push(Sample {
                id: c * spec.samples_per_category + s,
                label: c,
                tokens: Tensor::matrix(n_patch + 1, d, data)?,
                train: s < spec.samples_per_category / 2,
            });
        }
    }

    Ok(World {
        spec: spec.clone(),
        names,
        prototypes: Tensor::from_rows(&protos)?,
        pairs,
        base,
        novel,
        mix,
        projection,
        text_projection,
        samples,
    })
}

/// Least-squares fit W (d×H) with W·bag(prompt_c) = target_c for every
/// category (minimum-norm solution).
fn fit_text_projection(names: &[String], targets: &[Vec<f64>], hdim: usize) -> Result<Tensor> {
    use nalgebra::DMatrix;
    let nc = names.len();
    let e = targets[0].len();
    let mut h = DMatrix::<f64>::zeros(hdim, nc);
    for (c, name) in names.iter().enumerate() {
        let b = text::bag(&text::category_prompt(name), hdim).expect("prompt has tokens");
        for i in 0..hdim {
            h[(i, c)] = b[i];
        }
    }
    let t = DMatrix::<f64>::from_fn(e, nc, |i, c| targets[c][i]);
    let gram = h.transpose() * &h;
    let inv = gram
        .try_inverse()
        .ok_or_else(|| WorldError::Config("category prompts are linearly dependent".into()))?;
    let w = t * inv * h.transpose();
    let mut out = Tensor::zeros(&[e, hdim]);
    for i in 0..e {
        for j in 0..hdim {
            out.set(i, j, w[(i, j)]);
        }
    }
    Ok(out)
}

impl World {
    pub fn num_categories(&self) -> usize {
        self.spec.num_categories
    }

    pub fn sample(&self, id: usize) -> Result<&Sample> {
        self.samples
            .get(id)
            .ok_or_else(|| WorldError::Parameter(format!("sample {id} not in world")))
    }

    pub fn partner(&self, c: usize) -> Option<usize> {
        self.pairs.iter().find_map(|&(a, b)| {
            if a == c {
                Some(b)
            } else if b == c {
                Some(a)
            } else {
                None
            }
        })
    }

    pub fn is_base(&self, c: usize) -> bool {
        self.base.binary_search(&c).is_ok()
    }

    pub fn train_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().filter(|s| s.train).map(|s| s.id)
    }

    pub fn test_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().filter(|s| !s.train).map(|s| s.id)
    }

    /// Frozen encoder on a raw token matrix: tanh(mix · x) per row.
    pub fn encode_tokens(&self, raw: &Tensor) -> Tensor {
        let mut out = capt_numerics::matmul(raw, &self.mix.transpose()).expect("token width matches encoder");
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        out
    }

    /// Global feature from an encoded [CLS] token: normalize(P · c).
    pub fn project(&self, cls: &[f64]) -> Vec<f64> {
        normalized(&mat_vec(&self.projection, cls))
    }

    /// Encoded token sequence and unit-norm global feature f_I.
    pub fn encode_image(&self, id: usize) -> Result<(Tensor, Vec<f64>)> {
        let s = self.sample(id)?;
        let toks = self.encode_tokens(&s.tokens);
        let f = self.project(toks.row(0));
        Ok((toks, f))
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(WorldError::Parameter("empty text".into()));
        }
        let b = text::bag(text, self.spec.text_hash_dim)
            .ok_or_else(|| WorldError::Parameter(format!("text {text:?} has no tokens")))?;
        let w = mat_vec(&self.text_projection, &b);
        if l2_norm(&w) == 0.0 {
            return Err(WorldError::Parameter(format!("text {text:?} embeds to zero")));
        }
        Ok(normalized(&w))
    }

    /// Text features of every category prompt, one row per category.
    pub fn category_text_features(&self) -> Result<Tensor> {
        let rows = self
            .names
            .iter()
            .map(|n| self.encode_text(&text::category_prompt(n)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_rows(&rows)?)
    }

    /// Softmax over cosine similarities between `f` and the category text
    /// features at temperature `tau`.
    pub fn classify_feature(&self, f: &[f64], text: &Tensor, tau: f64) -> Result<Vec<f64>> {
        let sims: Vec<f64> = (0..text.rows()).map(|c| capt_numerics::cosine_similarity(f, text.row(c))).collect::<std::result::Result<_, _>>()?;
        Ok(softmax_vec(&sims, tau)?)
    }

    pub fn baseline_classify(&self, id: usize, tau: f64) -> Result<Vec<f64>> {
        let (_, f) = self.encode_image(id)?;
        let text = self.category_text_features()?;
        self.classify_feature(&f, &text, tau)
    }

    /// Baseline argmax for every sample, over all categories.
    pub fn baseline_predictions(&self) -> Result<Vec<usize>> {
        let text = self.category_text_features()?;
        self.samples
            .iter()
            .map(|s| {
                let f = self.project(self.encode_tokens(&s.tokens).row(0));
                let sims: Vec<f64> = (0..text.rows()).map(|c| capt_numerics::dot(&f, text.row(c))).collect();
                Ok(argmax(&sims))
            })
            .collect()
    }

    /// SHA-256 over the frozen encoder parameters.
    pub fn encoder_checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.mix, &self.projection, &self.text_projection] {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(WORLD_MAGIC);
        w.u32(WORLD_VERSION);
        let s = &self.spec;
        for v in [
            s.num_categories,
            s.num_confusable_pairs,
            s.samples_per_category,
            s.feature_dim,
            s.embed_dim,
            s.patch_rows,
            s.patch_cols,
            s.text_hash_dim,
        ] {
            w.u64(v as u64);
        }
        w.u64(s.seed);
        for v in [
            s.pair_angle,
            s.within_class_noise,
            s.base_fraction,
            s.cls_pair_jitter,
            s.shared_noise,
            s.position_scale,
            s.pair_stretch,
        ] {
            w.f64(v);
        }
        w.u64(self.names.len() as u64);
        for n in &self.names {
            w.str(n);
        }
        w.tensor(&self.prototypes);
        w.usizes(&self.pairs.iter().flat_map(|&(a, b)| [a, b]).collect::<Vec<_>>());
        w.usizes(&self.base);
        w.usizes(&self.novel);
        w.tensor(&self.mix);
        w.tensor(&self.projection);
        w.tensor(&self.text_projection);
        w.u64(self.samples.len() as u64);
        for smp in &self.samples {
            w.u64(smp.id as u64);
            w.u64(smp.label as u64);
            w.u8(smp.train as u8);
            w.tensor(&smp.tokens);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<World, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(WORLD_MAGIC)?;
        let version = r.u32()?;
        if version != WORLD_VERSION {
            return Err(FormatError {
                offset: 8,
                message: format!("unsupported world version {version}"),
            });
        }
        let mut ints = [0usize; 8];
        for v in ints.iter_mut() {
            *v = r.usize()?;
        }
        let seed = r.u64()?;
        let mut fl = [0f64; 7];
        for v in fl.iter_mut() {
            *v = r.f64()?;
        }
        let spec = WorldSpec {
            num_categories: ints[0],
            num_confusable_pairs: ints[1],
            samples_per_category: ints[2],
            feature_dim: ints[3],
            embed_dim: ints[4],
            patch_rows: ints[5],
            patch_cols: ints[6],
            text_hash_dim: ints[7],
            seed,
            pair_angle: fl[0],
            within_class_noise: fl[1],
            base_fraction: fl[2],
            cls_pair_jitter: fl[3],
            shared_noise: fl[4],
            position_scale: fl[5],
            pair_stretch: fl[6],
        };
        let at = r.offset();
        spec.validate().map_err(|e| FormatError {
            offset: at,
            message: e.to_string(),
        })?;
        let n_names = r.len_prefix(8)?;
        let names = (0..n_names).map(|_| r.str()).collect::<std::result::Result<Vec<_>, _>>()?;
        let prototypes = r.tensor()?;
        let flat = r.usizes()?;
        let base = r.usizes()?;
        let novel = r.usizes()?;
        let mix = r.tensor()?;
        let projection = r.tensor()?;
        let text_projection = r.tensor()?;
        let n_samples = r.len_prefix(17)?;
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let id = r.usize()?;
            let label = r.usize()?;
            let train = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(r.error(format!("bad train flag {b}"))),
            };
            let at = r.offset();
            let tokens = r.tensor()?;
            if tokens.shape() != [spec.num_patches() + 1, spec.feature_dim] || label >= spec.num_categories {
                return Err(FormatError {
                    offset: at,
                    message: "sample does not match spec".into(),
                });
            }
            samples.push(Sample { id, label, tokens, train });
        }
        r.finish()?;
        let (nc, d, e) = (spec.num_categories, spec.feature_dim, spec.embed_dim);
        let consistent = names.len() == nc
            && prototypes.shape() == [nc, d]
            && flat.len() == 2 * spec.num_confusable_pairs
            && flat.iter().chain(&base).chain(&novel).all(|&c| c < nc)
            && base.len() + novel.len() == nc
            && mix.shape() == [d, d]
            && projection.shape() == [e, d]
            && text_projection.shape() == [e, spec.text_hash_dim]
            && samples.iter().enumerate().all(|(i, s)| s.id == i);
        if !consistent {
            return Err(FormatError {
                offset: bytes.len(),
                message: "world sections are inconsistent with the spec".into(),
            });
        }
        let pairs = flat.chunks(2).map(|p| (p[0], p[1])).collect();
        Ok(World {
            spec,
            names,
            prototypes,
            pairs,
            base,
            novel,
            mix,
            projection,
            text_projection,
            samples,
        })
    }

    /// Writes the binary file and a `.json` sidecar holding the spec.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| WorldError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        std::fs::write(&side, json).map_err(|source| WorldError::Io { path: side, source })
    }

    pub fn load(path: &Path) -> Result<World> {
        let bytes = std::fs::read(path).map_err(|source| WorldError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        World::from_bytes(&bytes).map_err(|source| WorldError::Format {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}
