//! Sample confusion mining: representative retrieval, dynamic α, the
//! diff-manner adapter and fusion into the sample confusion feature.

mod adapter;
mod retrieval;

pub use adapter::{
    fuse, fuse_tape, fusion_weights, AdapterParams, AdapterTrainable, AdapterVars, QueryMode, ADAPTER_TENSORS,
};
pub use retrieval::{
    dynamic_alpha, random_representatives, representative_samples, Representative, RepresentativeSet,
    RetrievalConfig,
};

use capt_numerics::{NumericsError, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, SampleError>;

/// Runs the adapter on the instance (α = mean rep α) and on every
/// representative (own α), then fuses the CLS rows.
pub fn sample_confusion_feature(
    instance_tokens: &Tensor,
    reps: &RepresentativeSet,
    rep_tokens: &[Tensor],
    params: &AdapterParams,
) -> Result<Vec<f64>> {
    if reps.is_empty() {
        return Err(SampleError::Contract("empty representative set".into()));
    }
    if rep_tokens.len() != reps.len() {
        return Err(SampleError::Contract(format!(
            "{} representatives but {} token matrices",
            reps.len(),
            rep_tokens.len()
        )));
    }
    let inst = params.forward(instance_tokens, reps.mean_alpha())?;
    let mut rows = Vec::with_capacity(reps.len());
    for (r, t) in reps.reps.iter().zip(rep_tokens) {
        rows.push(params.forward(t, r.alpha)?.row(0).to_vec());
    }
    fuse(inst.row(0), &rows, &reps.intensities())
}
