//! Semantic confusion mining: pseudo-GT, confusion scores, pair selection
//! and commonality/difference prompt embeddings.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use capt_bank::ConfusionBank;
use capt_numerics::{l2_norm, normalized};
use capt_world::{World, WorldError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, SemanticError>;

/// Highest-confidence category, lowest index on ties.
pub fn pseudo_gt(confidences: &[f64]) -> Result<usize> {
    if confidences.is_empty() {
        return Err(SemanticError::Input("empty confidence vector".into()));
    }
    if let Some(i) = confidences.iter().position(|v| !v.is_finite()) {
        return Err(SemanticError::Input(format!("non-finite confidence at {i}")));
    }
    Ok(capt_numerics::argmax(confidences))
}

/// S_i = (1 + n_i / Σn) · C_i, and S = C when the bank row is empty.
pub fn confusion_score(confidences: &[f64], counts: &[i64]) -> Result<Vec<f64>> {
    if confidences.len() != counts.len() {
        return Err(SemanticError::Input(format!(
            "{} confidences vs {} counts",
            confidences.len(),
            counts.len()
        )));
    }
    if let Some(i) = counts.iter().position(|&n| n < 0) {
        return Err(SemanticError::Input(format!("negative count at {i}")));
    }
    let total: i64 = counts.iter().sum();
    if total == 0 {
        return Ok(confidences.to_vec());
    }
    let total = total as f64;
    Ok(confidences
        .iter()
        .zip(counts)
        .map(|(c, &n)| (1.0 + n as f64 / total) * c)
        .collect())
}

/// Bank counts as the signed vector [`confusion_score`] expects.
pub fn bank_counts(bank: &ConfusionBank, pseudo_gt: usize) -> Vec<i64> {
    bank.counts(pseudo_gt).into_iter().map(|n| n as i64).collect()
}

/// Top-`c` categories by score, excluding `pseudo_gt`; ties to the lower
/// category index.
pub fn select_pairs(scores: &[f64], pseudo_gt: usize, c: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| i != pseudo_gt).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(c).map(|i| (i, scores[i])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    Commonality,
    Difference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptSource {
    Generated,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub kind: PromptKind,
    pub source: PromptSource,
    pub vector: Vec<f64>,
    /// (pseudo_gt, category)
    pub pair: (usize, usize),
}

pub fn commonality_template(a: &str, b: &str) -> String {
    format!("common traits of {a} and {b}")
}

pub fn difference_template(a: &str, b: &str) -> String {
    format!("what distinguishes {a} from {b}")
}

fn check_pair(world: &World, pair: (usize, usize)) -> Result<()> {
    let n = world.num_categories();
    if pair.0 >= n || pair.1 >= n {
        return Err(SemanticError::Input(format!("pair {pair:?} outside {n} categories")));
    }
    Ok(())
}

/// Commonality and difference embeddings for (pseudo_gt, category). With
/// `external` texts those are embedded instead of the templates.
pub fn prompt_embeddings(
    world: &World,
    pair: (usize, usize),
    external: Option<(&str, &str)>,
) -> Result<(PromptEmbedding, PromptEmbedding)> {
    check_pair(world, pair)?;
    let (a, b) = (&world.names[pair.0], &world.names[pair.1]);
    let (ct, dt, source) = match external {
        Some((c, d)) => (c.to_string(), d.to_string(), PromptSource::External),
        None => (commonality_template(a, b), difference_template(a, b), PromptSource::Generated),
    };
    Ok((
        PromptEmbedding {
            kind: PromptKind::Commonality,
            source,
            vector: world.encode_text(&ct)?,
            pair,
        },
        PromptEmbedding {
            kind: PromptKind::Difference,
            source,
            vector: world.encode_text(&dt)?,
            pair,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalPair {
    pub a: String,
    pub b: String,
    pub commonality: Vec<f64>,
    pub difference: Vec<f64>,
}

/// Externally supplied prompt embeddings, keyed by category names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExternalPrompts {
    pub pairs: Vec<ExternalPair>,
}

impl ExternalPrompts {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| SemanticError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| SemanticError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Resolves prompt embeddings per pair: external vectors first, templates
/// otherwise. Results are cached.
#[derive(Debug, Clone, Default)]
pub struct PromptBook {
    external: HashMap<(String, String), (Vec<f64>, Vec<f64>)>,
    cache: HashMap<(usize, usize), (PromptEmbedding, PromptEmbedding)>,
}

impl PromptBook {
    pub fn new(world: &World, external: Option<&ExternalPrompts>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(ext) = external {
            let d = world.spec.embed_dim;
            for p in &ext.pairs {
                for (label, v) in [("commonality", &p.commonality), ("difference", &p.difference)] {
                    if v.len() != d || l2_norm(v) == 0.0 || v.iter().any(|x| !x.is_finite()) {
                        return Err(SemanticError::Config(format!(
                            "external {label} embedding for ({}, {}) must be a finite non-zero vector of length {d}",
                            p.a, p.b
                        )));
                    }
                }
                map.insert(
                    (p.a.clone(), p.b.clone()),
                    (normalized(&p.commonality), normalized(&p.difference)),
                );
            }
        }
        Ok(Self {
            external: map,
            cache: HashMap::new(),
        })
    }

    pub fn get(&mut self, world: &World, pair: (usize, usize)) -> Result<(PromptEmbedding, PromptEmbedding)> {
        if let Some(v) = self.cache.get(&pair) {
            return Ok(v.clone());
        }
        check_pair(world, pair)?;
        let key = (world.names[pair.0].clone(), world.names[pair.1].clone());
        let out = match self.external.get(&key) {
            Some((c, d)) => (
                PromptEmbedding {
                    kind: PromptKind::Commonality,
                    source: PromptSource::External,
                    vector: c.clone(),
                    pair,
                },
                PromptEmbedding {
                    kind: PromptKind::Difference,
                    source: PromptSource::External,
                    vector: d.clone(),
                    pair,
                },
            ),
            None => prompt_embeddings(world, pair, None)?,
        };
        self.cache.insert(pair, out.clone());
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionPairSet {
    pub sample_id: usize,
    pub pseudo_gt: usize,
    /// (category, score), non-increasing in score.
    pub pairs: Vec<(usize, f64)>,
    pub commonality: Vec<PromptEmbedding>,
    pub difference: Vec<PromptEmbedding>,
}

impl ConfusionPairSet {
    pub fn categories(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }
}

/// How the confusable categories are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairScoring {
    /// Confidence reweighted by bank statistics.
    ConfusionScore,
    /// Raw confidence only (semantic miner disabled).
    RawConfidence,
}

/// Full semantic mining for one sample: pseudo-GT, scores, top-`c` pairs
/// and their prompt embeddings. `anchor` overrides the pseudo-GT (used to
/// compare against real-GT anchoring).
pub fn mine_pairs(
    world: &World,
    bank: &ConfusionBank,
    book: &mut PromptBook,
    sample_id: usize,
    confidences: &[f64],
    c: usize,
    scoring: PairScoring,
    anchor: Option<usize>,
) -> Result<ConfusionPairSet> {
    let pg = match anchor {
        Some(a) => a,
        None => pseudo_gt(confidences)?,
    };
    let scores = match scoring {
        PairScoring::ConfusionScore => confusion_score(confidences, &bank_counts(bank, pg))?,
        PairScoring::RawConfidence => confidences.to_vec(),
    };
    let pairs = select_pairs(&scores, pg, c);
    let mut commonality = Vec::with_capacity(pairs.len());
    let mut difference = Vec::with_capacity(pairs.len());
    for &(cat, _) in &pairs {
        let (cm, df) = book.get(world, (pg, cat))?;
        commonality.push(cm);
        difference.push(df);
    }
    Ok(ConfusionPairSet {
        sample_id,
        pseudo_gt: pg,
        pairs,
        commonality,
        difference,
    })
}
