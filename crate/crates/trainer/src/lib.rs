//! Losses, the training loop, evaluation, run reports and the ablation
//! studies behind the `capt` binary.

pub mod check;
pub mod config;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod studies;

use std::path::PathBuf;

use capt_numerics::binio::FormatError;
use thiserror::Error;

pub use config::{ListScope, LossMode, QueryVariant, RepSelection, TrainConfig};
pub use loss::{loss_confuse, loss_confuse_tape, loss_ori, loss_ori_tape};
pub use model::{ModelParams, ModelVars, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use pipeline::{
    baseline_confusion_matrix, confusion_matrix, default_bank, correction_rate, evaluate, evaluate_baseline,
    evaluate_baseline_ctx, evaluate_ctx, harmonic_mean, pair_confusion, run_experiment, run_experiment_with_prompts,
    train, train_with_prompts, Accuracy, Context, Plan, Split, Trained,
};
pub use report::{
    heatmap_csv, heatmap_pgm, parse_heatmap_csv, read_report, read_run_config, write_heatmap, write_run_dir, Report,
    RunConfig,
};
pub use studies::{noise_ablation, noise_csv, sweep, sweep_csv, NoiseRow, SweepParam, SweepRow};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    World(#[from] capt_world::WorldError),
    #[error(transparent)]
    Bank(#[from] capt_bank::BankError),
    #[error(transparent)]
    Semantic(#[from] capt_semantic::SemanticError),
    #[error(transparent)]
    Sample(#[from] capt_sample::SampleError),
    #[error(transparent)]
    Mgde(#[from] capt_mgde::MgdeError),
    #[error(transparent)]
    Numerics(#[from] capt_numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;
