use std::collections::HashSet;

use capt_bank::{build_from_world, restricted_confidences, BaselineClassifier, ConfusionBank};
use capt_mgde::{init_experts, mask_training_step, MgdeConfig};
use capt_numerics::ops::top_k;
use capt_numerics::{dot, GradRecord, Tensor, Var};
use capt_sample::{
    fuse_tape, random_representatives, representative_samples, AdapterParams, RepresentativeSet, RetrievalConfig,
};
use capt_semantic::{mine_pairs, ConfusionPairSet, ExternalPrompts, PairScoring, PromptBook};
use capt_world::World;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ListScope, LossMode, RepSelection, TrainConfig};
use crate::loss::{loss_confuse_tape, loss_ori_tape};
use crate::model::{ModelParams, ModelVars};
use crate::report::Report;
use crate::{Result, TrainError};

const STREAM_ORDER: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_REPS: u64 = 4;
const STREAM_ADAPTER: u64 = 5;
const STREAM_MGDE: u64 = 6;

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Frozen encoder outputs for every sample, computed once.
#[derive(Debug, Clone)]
pub struct Context {
    /// Encoded (N+1)×D token matrices.
    pub tokens: Vec<Tensor>,
    /// Unit-norm global features f_I.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// C×d category text features.
    pub text: Tensor,
    /// Dᵀ of the frozen d×D projection.
    pub projection_t: Tensor,
}

impl Context {
    pub fn new(world: &World) -> Result<Self> {
        let mut tokens = Vec::with_capacity(world.samples.len());
        let mut features = Vec::with_capacity(world.samples.len());
        for s in &world.samples {
            let (t, f) = world.encode_image(s.id)?;
            tokens.push(t);
            features.push(f);
        }
        Ok(Self {
            tokens,
            features,
            labels: world.samples.iter().map(|s| s.label).collect(),
            text: world.category_text_features()?,
            projection_t: world.projection.transpose(),
        })
    }

    fn base_text_t(&self, base: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = base.iter().map(|&c| self.text.row(c).to_vec()).collect();
        Ok(Tensor::from_rows(&rows)?.transpose())
    }
}

/// Everything fixed about one training sample before optimisation starts.
#[derive(Debug, Clone)]
pub struct Plan {
    pub sample_id: usize,
    pub label: usize,
    pub pairs: ConfusionPairSet,
    pub reps: RepresentativeSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Base,
    Novel,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub base: Option<f64>,
    pub novel: Option<f64>,
}

impl Accuracy {
    pub fn hm(&self) -> Option<f64> {
        Some(harmonic_mean(self.base?, self.novel?))
    }
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ModelParams,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
    pub plans: Vec<Plan>,
    pub warnings: Vec<String>,
}

/// Bank built by the frozen classifier restricted to the base categories,
/// over the base training samples.
pub fn default_bank(world: &World, seed: u64, tau: f64) -> Result<ConfusionBank> {
    let clf = BaselineClassifier::new(world, Some(world.base.clone()))?;
    let ids: Vec<usize> = world.train_ids().filter(|&i| world.is_base(world.samples[i].label)).collect();
    Ok(build_from_world(world, &clf, &ids, tau, seed, "0")?)
}

/// The bank must come from this world's base training samples.
fn check_bank(world: &World, bank: &ConfusionBank) -> Result<()> {
    if bank.num_categories() != world.num_categories() {
        return Err(TrainError::Config(format!(
            "bank has {} categories, world has {}",
            bank.num_categories(),
            world.num_categories()
        )));
    }
    for r in bank.records() {
        let s = world
            .samples
            .get(r.sample_id)
            .ok_or_else(|| TrainError::Config(format!("bank record for unknown sample {}", r.sample_id)))?;
        if !s.train || !world.is_base(s.label) || s.label != r.true_category || !world.is_base(r.pseudo_gt) {
            return Err(TrainError::Config(format!(
                "bank record {} is not a base training sample of this world",
                r.sample_id
            )));
        }
    }
    Ok(())
}

pub fn build_plans(
    world: &World,
    ctx: &Context,
    bank: &ConfusionBank,
    book: &mut PromptBook,
    cfg: &TrainConfig,
) -> Result<Vec<Plan>> {
    let scoring = if cfg.use_sem {
        PairScoring::ConfusionScore
    } else {
        PairScoring::RawConfidence
    };
    let mut rep_rng = stream(cfg.seed, STREAM_REPS);
    let mut plans = Vec::new();
    for id in world.train_ids() {
        let label = ctx.labels[id];
        if !world.is_base(label) {
            continue;
        }
        let f = &ctx.features[id];
        let conf = restricted_confidences(f, &ctx.text, Some(&world.base), cfg.tau)?;
        let pairs = mine_pairs(world, bank, book, id, &conf, cfg.pairs_c, scoring, None)?;
        let rcfg = RetrievalConfig {
            s: cfg.alpha_s,
            gamma: cfg.alpha_gamma,
            reps_per_category: cfg.reps_per_category,
            exclude: Some(id),
        };
        let reps = match cfg.rep_selection {
            RepSelection::MostSimilar => representative_samples(f, &pairs, bank, &rcfg)?,
            RepSelection::Random => random_representatives(f, &pairs, bank, &rcfg, &mut rep_rng)?,
        };
        plans.push(Plan {
            sample_id: id,
            label,
            pairs,
            reps,
        });
    }
    if plans.is_empty() {
        return Err(TrainError::Config("no base training samples".into()));
    }
    Ok(plans)
}

/// Initial adapter and experts. The semantic experts are seeded from the
/// distinct prompt embeddings mined for the plans.
pub fn init_model(world: &World, ctx: &Context, plans: &[Plan], cfg: &TrainConfig) -> Result<(ModelParams, Vec<String>)> {
    let mut warnings = Vec::new();
    let dim = world.spec.embed_dim;
    let grid = (world.spec.patch_rows, world.spec.patch_cols);
    let mut adapter = AdapterParams::new(
        dim,
        cfg.heads,
        cfg.kernel_size,
        grid,
        stream(cfg.seed, STREAM_ADAPTER).next_u64(),
    )?;
    adapter.mode = cfg.query.into();

    let mut seen = HashSet::new();
    let (mut common, mut diff) = (Vec::new(), Vec::new());
    for p in plans {
        for (i, &(cat, _)) in p.pairs.pairs.iter().enumerate() {
            if seen.insert((p.pairs.pseudo_gt, cat)) {
                common.push(p.pairs.commonality[i].vector.clone());
                diff.push(p.pairs.difference[i].vector.clone());
            }
        }
    }
    if common.is_empty() {
        warnings.push("no confusion pairs mined; experts seeded from base category prompts".into());
        for &c in &world.base {
            common.push(ctx.text.row(c).to_vec());
            diff.push(ctx.text.row(c).to_vec());
        }
    }
    let mut clusters = cfg.clusters;
    if clusters > common.len() {
        warnings.push(format!("only {} distinct prompts; clusters reduced from {clusters}", common.len()));
        clusters = common.len();
    }
    let mgde_cfg = MgdeConfig {
        clusters,
        hidden: cfg.hidden,
        top_k: cfg.top_k,
        w2_scale: cfg.mgde_w2_scale,
        seed: stream(cfg.seed, STREAM_MGDE).next_u64(),
    };
    let mgde = init_experts(&world.projection, &common, &diff, &mgde_cfg)?;

    let with_reps: Vec<f64> = plans.iter().filter(|p| !p.reps.is_empty()).map(|p| p.reps.mean_alpha()).collect();
    let inference_alpha = if with_reps.is_empty() {
        warnings.push("no sample found a representative; every step uses the base cross-entropy".into());
        0.0
    } else {
        with_reps.iter().sum::<f64>() / with_reps.len() as f64
    };
    Ok((
        ModelParams {
            adapter,
            mgde,
            inference_alpha,
            use_sam: cfg.use_sam,
            use_mgde: cfg.use_mgde,
            seed: cfg.seed,
            encoder_checksum: world.encoder_checksum(),
        },
        warnings,
    ))
}

/// Random streams used while building one loss.
pub struct StepRngs<'a> {
    pub noise: Option<&'a mut ChaCha8Rng>,
    pub mask: Option<&'a mut ChaCha8Rng>,
}

fn readout_tape(rec: &mut GradRecord, model: &ModelParams, vars: &ModelVars, tokens: &Tensor) -> Result<Var> {
    let t = rec.constant(tokens.clone());
    if model.use_sam {
        Ok(model.adapter.cls_readout_tape(rec, &vars.adapter, t)?)
    } else {
        Ok(rec.slice_rows(t, 0, 1)?)
    }
}

/// Rows (1×D, unit norm) → normalize((rows + MGDE(rows)) · Pᵀ), L×d.
fn head_tape(
    rec: &mut GradRecord,
    ctx: &Context,
    model: &ModelParams,
    vars: &ModelVars,
    rows: &[Var],
    p_mask: f64,
    mask_rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mut out = Vec::with_capacity(rows.len());
    for &row in rows {
        if !model.use_mgde {
            out.push(row);
            continue;
        }
        let mask = match mask_rng.as_deref_mut() {
            Some(rng) if p_mask > 0.0 => {
                let logits = model.mgde.logits(rec.value(row).data());
                let activated: Vec<usize> = top_k(&logits, model.mgde.router.top_k)?.iter().map(|t| t.0).collect();
                Some(mask_training_step(model.mgde.width(), &activated, p_mask, rng)?)
            }
            _ => None,
        };
        let (m, _) = model.mgde.route_and_fuse_tape(rec, &vars.mgde, row, mask.as_ref())?;
        out.push(rec.add(row, m)?);
    }
    let h = if out.len() == 1 { out[0] } else { rec.concat_rows(&out)? };
    let pt = rec.constant(ctx.projection_t.clone());
    let g = rec.matmul(h, pt)?;
    Ok(rec.normalize_rows(g)?)
}

fn text_rows(rec: &mut GradRecord, ctx: &Context, cats: &[usize]) -> Result<Var> {
    let rows: Vec<Vec<f64>> = cats.iter().map(|&c| ctx.text.row(c).to_vec()).collect();
    Ok(rec.constant(Tensor::from_rows(&rows)?))
}

/// Tape terms of one plan before the contrastive lists are reduced.
pub enum SampleTerms {
    /// No representatives: cross-entropy over the base categories.
    Ori(Var),
    /// L×d image rows, the category of each row, and the optional weighted
    /// base cross-entropy of the fused row.
    Lists { g: Var, cats: Vec<usize>, ori: Option<Var> },
}

/// Builds the rows of one plan. `base_t` is the d×|base| matrix of base
/// text features and `base_pos` maps the plan label into it.
#[allow(clippy::too_many_arguments)]
pub fn sample_terms(
    rec: &mut GradRecord,
    ctx: &Context,
    model: &ModelParams,
    vars: &ModelVars,
    plan: &Plan,
    cfg: &TrainConfig,
    base_t: Var,
    base_pos: usize,
    rngs: &mut StepRngs,
) -> Result<SampleTerms> {
    let inst = readout_tape(rec, model, vars, &ctx.tokens[plan.sample_id])?;
    if plan.reps.is_empty() {
        let f = rec.normalize_rows(inst)?;
        let g = head_tape(rec, ctx, model, vars, &[f], cfg.p_mask, &mut rngs.mask)?;
        return Ok(SampleTerms::Ori(loss_ori_tape(rec, g, base_t, base_pos, cfg.tau)?));
    }
    let mut reps = Vec::with_capacity(plan.reps.len());
    for r in &plan.reps.reps {
        let mut v = readout_tape(rec, model, vars, &ctx.tokens[r.sample_id])?;
        if let Some(rng) = rngs.noise.as_deref_mut() {
            if cfg.noise_level > 0.0 {
                let val = rec.value(v);
                let scale = cfg.noise_level * val.norm();
                let z: Vec<f64> = (0..val.len())
                    .map(|_| scale * rand::Rng::sample::<f64, _>(rng, StandardNormal))
                    .collect();
                let n = rec.constant(Tensor::row_vector(z));
                v = rec.add(v, n)?;
            }
        }
        reps.push(v);
    }
    let fused = if model.use_sam {
        fuse_tape(rec, inst, &reps, &plan.reps.intensities())?
    } else {
        rec.normalize_rows(inst)?
    };
    let mut rows = vec![fused];
    for &r in &reps {
        rows.push(rec.normalize_rows(r)?);
    }
    let g = head_tape(rec, ctx, model, vars, &rows, cfg.p_mask, &mut rngs.mask)?;
    let mut cats = vec![plan.label];
    cats.extend(plan.reps.reps.iter().map(|r| r.category));
    let ori = match cfg.loss {
        LossMode::ConfuseOnly => None,
        LossMode::ConfusePlusOri { lambda } => {
            let g0 = rec.slice_rows(g, 0, 1)?;
            let lo = loss_ori_tape(rec, g0, base_t, base_pos, cfg.tau)?;
            Some(rec.scale(lo, lambda))
        }
    };
    Ok(SampleTerms::Lists { g, cats, ori })
}

fn add_opt(rec: &mut GradRecord, acc: Option<Var>, v: Var) -> Result<Var> {
    Ok(match acc {
        None => v,
        Some(a) => rec.add(a, v)?,
    })
}

/// Mean loss of a batch of plans. With [`ListScope::Sample`] every plan
/// gets its own contrastive lists; with [`ListScope::Batch`] the rows of
/// all plans in the batch form one list.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    rec: &mut GradRecord,
    ctx: &Context,
    world: &World,
    model: &ModelParams,
    vars: &ModelVars,
    plans: &[&Plan],
    cfg: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<Var> {
    if plans.is_empty() {
        return Err(TrainError::Contract("empty batch".into()));
    }
    let base_t = rec.constant(ctx.base_text_t(&world.base)?);
    let mut total: Option<Var> = None;
    let mut pooled_g = Vec::new();
    let mut pooled_cats = Vec::new();
    for plan in plans {
        let pos = world
            .base
            .binary_search(&plan.label)
            .map_err(|_| TrainError::Contract(format!("plan label {} is not a base category", plan.label)))?;
        match sample_terms(rec, ctx, model, vars, plan, cfg, base_t, pos, rngs)? {
            SampleTerms::Ori(l) => total = Some(add_opt(rec, total, l)?),
            SampleTerms::Lists { g, cats, ori } => {
                if let Some(o) = ori {
                    total = Some(add_opt(rec, total, o)?);
                }
                match cfg.list_scope {
                    ListScope::Sample => {
                        let t = text_rows(rec, ctx, &cats)?;
                        let l = loss_confuse_tape(rec, g, t, cfg.tau)?;
                        total = Some(add_opt(rec, total, l)?);
                    }
                    ListScope::Batch => {
                        pooled_g.push(g);
                        pooled_cats.extend(cats);
                    }
                }
            }
        }
    }
    if !pooled_g.is_empty() {
        let n = pooled_g.len();
        let g = if n == 1 { pooled_g[0] } else { rec.concat_rows(&pooled_g)? };
        let t = text_rows(rec, ctx, &pooled_cats)?;
        let l = loss_confuse_tape(rec, g, t, cfg.tau)?;
        let l = rec.scale(l, n as f64);
        total = Some(add_opt(rec, total, l)?);
    }
    let total = total.ok_or_else(|| TrainError::Contract("empty batch".into()))?;
    Ok(rec.scale(total, 1.0 / plans.len() as f64))
}

pub fn train(world: &World, bank: &ConfusionBank, cfg: &TrainConfig) -> Result<Trained> {
    train_with_prompts(world, bank, cfg, None)
}

pub fn train_with_prompts(
    world: &World,
    bank: &ConfusionBank,
    cfg: &TrainConfig,
    external: Option<&ExternalPrompts>,
) -> Result<Trained> {
    cfg.validate()?;
    check_bank(world, bank)?;
    let ctx = Context::new(world)?;
    let mut book = PromptBook::new(world, external)?;
    let plans = build_plans(world, &ctx, bank, &mut book, cfg)?;
    let (mut model, mut warnings) = init_model(world, &ctx, &plans, cfg)?;
    if bank.is_empty() {
        warnings.push("confusion bank is empty".into());
    }

    let mut order_rng = stream(cfg.seed, STREAM_ORDER);
    let mut noise_rng = stream(cfg.seed, STREAM_NOISE);
    let mut mask_rng = stream(cfg.seed, STREAM_MASK);
    let mgde_lr = cfg.lr * cfg.mgde_lr_scale;
    let mut order: Vec<usize> = (0..plans.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Plan> = chunk.iter().map(|&i| &plans[i]).collect();
            let mut rec = GradRecord::new();
            let vars = model.register(&mut rec)?;
            let mut rngs = StepRngs {
                noise: (cfg.noise_level > 0.0).then_some(&mut noise_rng),
                mask: Some(&mut mask_rng),
            };
            let loss = batch_loss(&mut rec, &ctx, world, &model, &vars, &batch, cfg, &mut rngs)?;
            let value = rec.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::Contract(format!("non-finite training loss {value}")));
            }
            let grads = rec.backward(loss)?;
            model.sgd_step(&vars, &grads, cfg.lr, mgde_lr);
            sum += value;
            batches += 1;
        }
        loss_curve.push(sum / batches as f64);
    }
    Ok(Trained {
        model,
        loss_curve,
        plans,
        warnings,
    })
}

/// Index of the best-matching candidate (lowest index on ties).
fn predict(g: &[f64], text: &Tensor, cands: &[usize]) -> usize {
    let mut best = cands[0];
    let mut best_s = f64::NEG_INFINITY;
    for &c in cands {
        let s = dot(g, text.row(c));
        if s > best_s {
            best = c;
            best_s = s;
        }
    }
    best
}

fn model_features(ctx: &Context, model: &ModelParams, projection: &Tensor, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
    ids.iter()
        .map(|&i| model.inference_feature(&ctx.tokens[i], projection))
        .collect()
}

fn split_ids(world: &World, cats: &[usize]) -> Vec<usize> {
    world.test_ids().filter(|&i| cats.binary_search(&world.samples[i].label).is_ok()).collect()
}

fn accuracy_on(world: &World, ctx: &Context, feats: &dyn Fn(&[usize]) -> Result<Vec<Vec<f64>>>, cats: &[usize]) -> Result<Option<f64>> {
    let ids = split_ids(world, cats);
    if cats.is_empty() || ids.is_empty() {
        return Ok(None);
    }
    let fs = feats(&ids)?;
    let correct = ids
        .iter()
        .zip(&fs)
        .filter(|(&i, f)| predict(f, &ctx.text, cats) == ctx.labels[i])
        .count();
    Ok(Some(correct as f64 / ids.len() as f64))
}

fn evaluate_with(
    world: &World,
    ctx: &Context,
    feats: &dyn Fn(&[usize]) -> Result<Vec<Vec<f64>>>,
    split: Split,
) -> Result<Accuracy> {
    let want_base = split != Split::Novel;
    let want_novel = split != Split::Base;
    let base = if want_base { accuracy_on(world, ctx, feats, &world.base)? } else { None };
    let novel = if want_novel { accuracy_on(world, ctx, feats, &world.novel)? } else { None };
    match split {
        Split::Base if base.is_none() => Err(TrainError::Config("base split has no test samples".into())),
        Split::Novel if novel.is_none() => Err(TrainError::Config("novel split has no test samples".into())),
        Split::Both if base.is_none() && novel.is_none() => Err(TrainError::Config("no test samples".into())),
        _ => Ok(Accuracy { base, novel }),
    }
}

/// Test accuracy with each split classified among its own categories.
/// `Both` leaves an empty split as `None`; asking for it alone is an error.
pub fn evaluate(world: &World, model: &ModelParams, split: Split) -> Result<Accuracy> {
    let ctx = Context::new(world)?;
    evaluate_ctx(world, &ctx, model, split)
}

pub fn evaluate_ctx(world: &World, ctx: &Context, model: &ModelParams, split: Split) -> Result<Accuracy> {
    check_model(world, model)?;
    evaluate_with(world, ctx, &|ids| model_features(ctx, model, &world.projection, ids), split)
}

pub fn evaluate_baseline(world: &World, split: Split) -> Result<Accuracy> {
    let ctx = Context::new(world)?;
    evaluate_baseline_ctx(world, &ctx, split)
}

pub fn evaluate_baseline_ctx(world: &World, ctx: &Context, split: Split) -> Result<Accuracy> {
    evaluate_with(world, ctx, &|ids| Ok(ids.iter().map(|&i| ctx.features[i].clone()).collect()), split)
}

fn check_model(world: &World, model: &ModelParams) -> Result<()> {
    if model.encoder_checksum != world.encoder_checksum() {
        return Err(TrainError::Config("checkpoint was trained against a different frozen encoder".into()));
    }
    if model.adapter.width() != world.spec.embed_dim
        || model.adapter.num_patches() != world.spec.num_patches()
    {
        return Err(TrainError::Config("checkpoint shapes do not match the world".into()));
    }
    Ok(())
}

fn matrix_from(world: &World, ctx: &Context, feats: &dyn Fn(&[usize]) -> Result<Vec<Vec<f64>>>) -> Result<Vec<Vec<usize>>> {
    let c = world.num_categories();
    let mut m = vec![vec![0; c]; c];
    for cats in [&world.base, &world.novel] {
        let ids = split_ids(world, cats);
        if ids.is_empty() {
            continue;
        }
        for (&i, f) in ids.iter().zip(feats(&ids)?) {
            m[ctx.labels[i]][predict(&f, &ctx.text, cats)] += 1;
        }
    }
    Ok(m)
}

/// Test-set counts `m[true][predicted]`, each split among its own categories.
pub fn confusion_matrix(world: &World, ctx: &Context, model: &ModelParams) -> Result<Vec<Vec<usize>>> {
    check_model(world, model)?;
    matrix_from(world, ctx, &|ids| model_features(ctx, model, &world.projection, ids))
}

pub fn baseline_confusion_matrix(world: &World, ctx: &Context) -> Result<Vec<Vec<usize>>> {
    matrix_from(world, ctx, &|ids| Ok(ids.iter().map(|&i| ctx.features[i].clone()).collect()))
}

/// Fraction of paired-category test samples predicted as the partner.
pub fn pair_confusion(world: &World, m: &[Vec<usize>]) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for &(a, b) in &world.pairs {
        for (t, p) in [(a, b), (b, a)] {
            hit += m[t][p];
            total += m[t].iter().sum::<usize>();
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Share of bank records the trained model classifies correctly among the
/// base categories; `None` for an empty bank.
pub fn correction_rate(world: &World, ctx: &Context, bank: &ConfusionBank, model: &ModelParams) -> Result<Option<f64>> {
    check_model(world, model)?;
    if bank.is_empty() {
        return Ok(None);
    }
    let mut fixed = 0;
    for r in bank.records() {
        let g = model.inference_feature(&ctx.tokens[r.sample_id], &world.projection)?;
        if predict(&g, &ctx.text, &world.base) == r.true_category {
            fixed += 1;
        }
    }
    Ok(Some(fixed as f64 / bank.len() as f64))
}

/// Train, evaluate and assemble the run report.
pub fn run_experiment(world: &World, bank: &ConfusionBank, cfg: &TrainConfig) -> Result<(Trained, Report)> {
    run_experiment_with_prompts(world, bank, cfg, None)
}

pub fn run_experiment_with_prompts(
    world: &World,
    bank: &ConfusionBank,
    cfg: &TrainConfig,
    external: Option<&ExternalPrompts>,
) -> Result<(Trained, Report)> {
    let encoder_before = world.encoder_checksum();
    let bank_before = bank.checksum();
    let trained = train_with_prompts(world, bank, cfg, external)?;
    let ctx = Context::new(world)?;
    let acc = evaluate_ctx(world, &ctx, &trained.model, Split::Both)?;
    let base_acc = evaluate_baseline_ctx(world, &ctx, Split::Both)?;
    let before = baseline_confusion_matrix(world, &ctx)?;
    let after = confusion_matrix(world, &ctx, &trained.model)?;
    let report = Report {
        seed: cfg.seed,
        base_accuracy: acc.base,
        novel_accuracy: acc.novel,
        hm: acc.hm(),
        baseline_base_accuracy: base_acc.base,
        baseline_novel_accuracy: base_acc.novel,
        baseline_hm: base_acc.hm(),
        correction_rate: correction_rate(world, &ctx, bank, &trained.model)?,
        pair_confusion_before: pair_confusion(world, &before),
        pair_confusion_after: pair_confusion(world, &after),
        bank_records: bank.len(),
        training_samples: trained.plans.len(),
        samples_with_reps: trained.plans.iter().filter(|p| !p.reps.is_empty()).count(),
        inference_alpha: trained.model.inference_alpha,
        loss_curve: trained.loss_curve.clone(),
        category_names: world.names.clone(),
        confusion_before: before,
        confusion_after: after,
        encoder_checksum_before: encoder_before,
        encoder_checksum_after: world.encoder_checksum(),
        bank_checksum_before: bank_before,
        bank_checksum_after: bank.checksum(),
        warnings: trained.warnings.clone(),
        config: cfg.clone(),
    };
    Ok((trained, report))
}
