//! Finite-difference check of the full training loss on a small world.

use capt_numerics::{check_tape_fn, FdConfig, FdReport, GradRecord, NumericsError, Tensor};
use capt_sample::AdapterParams;
use capt_world::{generate_world, WorldSpec};

use crate::config::TrainConfig;
use crate::pipeline::{batch_loss, build_plans, default_bank, init_model, Context, Plan, StepRngs};
use crate::{Result, TrainError};

/// A world small enough that every parameter can be perturbed.
pub fn small_world_spec(seed: u64) -> WorldSpec {
    WorldSpec {
        num_categories: 8,
        num_confusable_pairs: 3,
        pair_angle: 0.3,
        samples_per_category: 6,
        base_fraction: 0.75,
        feature_dim: 8,
        embed_dim: 8,
        patch_rows: 2,
        patch_cols: 2,
        text_hash_dim: 16,
        seed,
        ..WorldSpec::default()
    }
}

pub fn small_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        hidden: 6,
        clusters: 2,
        heads: 2,
        pairs_c: 3,
        mgde_w2_scale: 1.0,
        ..TrainConfig::default()
    }
}

/// Central differences against the tape gradient for every trainable
/// tensor (adapter, router, experts, prompt projections) of a batch loss.
/// Output projection and expert second layers start random so no
/// gradient is trivially zero.
pub fn full_loss_gradient_check(seed: u64, fd: FdConfig) -> Result<(FdReport, Vec<String>)> {
    let world = generate_world(&small_world_spec(seed))?;
    let cfg = small_train_config(seed);
    let bank = default_bank(&world, seed, cfg.tau)?;
    let ctx = Context::new(&world)?;
    let mut book = capt_semantic::PromptBook::new(&world, None)?;
    let plans = build_plans(&world, &ctx, &bank, &mut book, &cfg)?;
    let (mut model, _) = init_model(&world, &ctx, &plans, &cfg)?;
    let mut adapter = AdapterParams::random(
        world.spec.embed_dim,
        cfg.heads,
        cfg.kernel_size,
        (world.spec.patch_rows, world.spec.patch_cols),
        seed ^ 0xad,
    )?;
    adapter.mode = cfg.query.into();
    model.adapter = adapter;

    let mut batch: Vec<&Plan> = plans.iter().filter(|p| !p.reps.is_empty()).take(3).collect();
    if batch.is_empty() {
        return Err(TrainError::Config("small world produced no representatives".into()));
    }
    batch.extend(plans.iter().find(|p| p.reps.is_empty()));

    let mut rec = GradRecord::new();
    model.register(&mut rec)?;
    let entries = rec.params();
    let names: Vec<String> = entries.iter().map(|e| e.name.clone()).collect();
    let values: Vec<Tensor> = entries.iter().map(|e| rec.value(e.var).clone()).collect();

    let report = check_tape_fn(
        &names,
        &values,
        |rec, ps| {
            let mut m = model.clone();
            m.set_flat(ps).map_err(|e| NumericsError::Usage(e.to_string()))?;
            let vars = m.register(rec).map_err(|e| NumericsError::Usage(e.to_string()))?;
            let mut rngs = StepRngs { noise: None, mask: None };
            batch_loss(rec, &ctx, &world, &m, &vars, &batch, &cfg, &mut rngs)
                .map_err(|e| NumericsError::Usage(e.to_string()))
        },
        fd,
    )?;
    Ok((report, names))
}
