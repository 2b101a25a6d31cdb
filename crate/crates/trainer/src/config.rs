use capt_sample::QueryMode;
use serde::{Deserialize, Serialize};

use crate::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LossMode {
    ConfuseOnly,
    ConfusePlusOri { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepSelection {
    /// Most similar bank record per confusing category.
    MostSimilar,
    /// Uniformly random bank record per confusing category.
    Random,
}

/// Which rows share one contrastive list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListScope {
    /// One list per sample: its fused row plus its representatives.
    Sample,
    /// The rows of every sample in the batch form a single list.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryVariant {
    FullSequence,
    ClsOnly,
}

impl From<QueryVariant> for QueryMode {
    fn from(q: QueryVariant) -> Self {
        match q {
            QueryVariant::FullSequence => QueryMode::FullSequence,
            QueryVariant::ClsOnly => QueryMode::ClsOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Confusion pairs kept per sample.
    pub pairs_c: usize,
    pub reps_per_category: usize,
    pub tau: f64,
    pub lr: f64,
    pub mgde_lr_scale: f64,
    pub loss: LossMode,
    pub list_scope: ListScope,
    pub heads: usize,
    pub kernel_size: usize,
    pub query: QueryVariant,
    pub alpha_s: f64,
    pub alpha_gamma: f64,
    pub top_k: usize,
    pub clusters: usize,
    pub hidden: usize,
    pub p_mask: f64,
    pub mgde_w2_scale: f64,
    pub rep_selection: RepSelection,
    /// Bank-weighted confusion scores; off means raw confidence.
    pub use_sem: bool,
    /// Adapter and sample fusion; off means f = frozen CLS.
    pub use_sam: bool,
    pub use_mgde: bool,
    /// Gaussian noise on representative readouts, std = level·‖readout‖.
    pub noise_level: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 25,
            batch_size: 4,
            pairs_c: 5,
            reps_per_category: 1,
            tau: 0.07,
            lr: 0.01,
            mgde_lr_scale: 1.0,
            loss: LossMode::ConfuseOnly,
            list_scope: ListScope::Batch,
            heads: 2,
            kernel_size: 3,
            query: QueryVariant::FullSequence,
            alpha_s: 5.0,
            alpha_gamma: 0.5,
            top_k: 2,
            clusters: 4,
            hidden: 64,
            p_mask: 0.1,
            mgde_w2_scale: 0.0,
            rep_selection: RepSelection::MostSimilar,
            use_sem: true,
            use_sam: true,
            use_mgde: true,
            noise_level: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.pairs_c == 0 || self.reps_per_category == 0 {
            return bad("epochs, batch_size, pairs_c and reps_per_category must be positive");
        }
        if !(self.tau > 0.0) || !(self.lr > 0.0) || !(self.mgde_lr_scale >= 0.0) {
            return bad("tau and lr must be positive, mgde_lr_scale non-negative");
        }
        if let LossMode::ConfusePlusOri { lambda } = self.loss {
            if !(lambda > 0.0) {
                return bad("loss weight lambda must be positive");
            }
        }
        if self.heads == 0 || self.kernel_size % 2 == 0 || self.hidden == 0 || self.clusters == 0 {
            return bad("heads and hidden must be positive, kernel size odd");
        }
        if !(self.alpha_s > 1.0) || !(self.alpha_gamma > 0.0) {
            return bad("alpha schedule needs s > 1 and gamma > 0");
        }
        if self.top_k == 0 || self.top_k > capt_mgde::NUM_EXPERTS {
            return bad("top_k must be in 1..=3");
        }
        if !(0.0..=1.0).contains(&self.p_mask) || !(0.0..=1.0).contains(&self.noise_level) {
            return bad("p_mask and noise_level must be in [0, 1]");
        }
        if !(self.mgde_w2_scale >= 0.0) {
            return bad("mgde_w2_scale must be non-negative");
        }
        Ok(())
    }
}
