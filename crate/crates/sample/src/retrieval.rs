use capt_bank::{ConfusionBank, ConfusionRecord};
use capt_numerics::cosine_similarity;
use capt_semantic::ConfusionPairSet;
use rand::Rng;

use crate::{Result, SampleError};

/// α = s · max(c, 0)^γ
pub fn dynamic_alpha(intensity: f64, s: f64, gamma: f64) -> Result<f64> {
    if !(s > 1.0) || !(gamma > 0.0) {
        return Err(SampleError::Config(format!(
            "alpha schedule needs s > 1 and gamma > 0, got s={s}, gamma={gamma}"
        )));
    }
    Ok(s * intensity.max(0.0).powf(gamma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Representative {
    pub category: usize,
    pub sample_id: usize,
    /// Cosine similarity to the instance feature.
    pub intensity: f64,
    pub alpha: f64,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RepresentativeSet {
    pub pseudo_gt: usize,
    pub reps: Vec<Representative>,
    /// Pair categories with no usable bank record.
    pub skipped: Vec<usize>,
}

impl RepresentativeSet {
    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn intensities(&self) -> Vec<f64> {
        self.reps.iter().map(|r| r.intensity).collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.reps.iter().map(|r| r.alpha).collect()
    }

    pub fn mean_alpha(&self) -> f64 {
        if self.reps.is_empty() {
            0.0
        } else {
            self.reps.iter().map(|r| r.alpha).sum::<f64>() / self.reps.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalConfig {
    pub s: f64,
    pub gamma: f64,
    pub reps_per_category: usize,
    /// Sample id never returned as a representative (the instance itself).
    pub exclude: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            s: 5.0,
            gamma: 0.5,
            reps_per_category: 1,
            exclude: None,
        }
    }
}

impl RetrievalConfig {
    fn validate(&self) -> Result<()> {
        dynamic_alpha(0.0, self.s, self.gamma)?;
        if self.reps_per_category == 0 {
            return Err(SampleError::Config("reps_per_category must be at least 1".into()));
        }
        Ok(())
    }
}

fn candidates<'a>(
    bank: &'a ConfusionBank,
    pseudo_gt: usize,
    category: usize,
    exclude: Option<usize>,
) -> Vec<&'a ConfusionRecord> {
    bank.retrieve(pseudo_gt, category)
        .iter()
        .filter(|r| Some(r.sample_id) != exclude)
        .collect()
}

fn make_rep(f: &[f64], rec: &ConfusionRecord, category: usize, cfg: &RetrievalConfig) -> Result<Representative> {
    let intensity = cosine_similarity(f, &rec.feature)?;
    Ok(Representative {
        category,
        sample_id: rec.sample_id,
        intensity,
        alpha: dynamic_alpha(intensity, cfg.s, cfg.gamma)?,
        feature: rec.feature.clone(),
    })
}

/// For every pair category, the stored record(s) most similar to `f`
/// (ties to the lower sample id). Categories without records are skipped.
pub fn representative_samples(
    f: &[f64],
    pairs: &ConfusionPairSet,
    bank: &ConfusionBank,
    cfg: &RetrievalConfig,
) -> Result<RepresentativeSet> {
    cfg.validate()?;
    let mut out = RepresentativeSet {
        pseudo_gt: pairs.pseudo_gt,
        ..Default::default()
    };
    for &(cat, _) in &pairs.pairs {
        let cands = candidates(bank, pairs.pseudo_gt, cat, cfg.exclude);
        if cands.is_empty() {
            out.skipped.push(cat);
            continue;
        }
        let mut scored = Vec::with_capacity(cands.len());
        for rec in cands {
            scored.push((cosine_similarity(f, &rec.feature)?, rec));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.sample_id.cmp(&b.1.sample_id)));
        for (_, rec) in scored.into_iter().take(cfg.reps_per_category) {
            out.reps.push(make_rep(f, rec, cat, cfg)?);
        }
    }
    Ok(out)
}

/// Uniform random choice among each category's records; the ablation
/// counterpart of [`representative_samples`].
pub fn random_representatives<R: Rng>(
    f: &[f64],
    pairs: &ConfusionPairSet,
    bank: &ConfusionBank,
    cfg: &RetrievalConfig,
    rng: &mut R,
) -> Result<RepresentativeSet> {
    cfg.validate()?;
    let mut out = RepresentativeSet {
        pseudo_gt: pairs.pseudo_gt,
        ..Default::default()
    };
    for &(cat, _) in &pairs.pairs {
        let mut cands = candidates(bank, pairs.pseudo_gt, cat, cfg.exclude);
        if cands.is_empty() {
            out.skipped.push(cat);
            continue;
        }
        for _ in 0..cfg.reps_per_category.min(cands.len()) {
            let i = rng.random_range(0..cands.len());
            let rec = cands.swap_remove(i);
            out.reps.push(make_rep(f, rec, cat, cfg)?);
        }
    }
    Ok(out)
}
