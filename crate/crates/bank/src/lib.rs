//! Confusion bank.
//!
//! A training sample with true category T that the builder predicts as P
//! is filed under pseudo-GT P and keyed by T. Counts are always derived
//! from the record lists.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use capt_numerics::binio::{ByteReader, ByteWriter, FormatError};
use capt_numerics::{argmax, l2_norm, NumericsError};
use capt_world::{World, WorldError};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const BANK_MAGIC: &[u8; 8] = b"CAPTBANK";
pub const BANK_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("banks from different builders cannot be merged: {0:?} vs {1:?}")]
    ProvenanceMismatch(Provenance, Provenance),
    #[error(transparent)]
    World(#[from] WorldError),
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

pub type Result<T> = std::result::Result<T, BankError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionRecord {
    /// Also the reference to the sample's stored token sequence.
    pub sample_id: usize,
    /// Category the builder predicted; the key the record is filed under.
    pub pseudo_gt: usize,
    /// The sample's real category; the confused-category key.
    pub true_category: usize,
    /// Unit-norm global feature cached at build time.
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub builder: String,
    pub seed: u64,
    /// Caller-supplied build stamp; kept explicit so identical inputs give
    /// identical files.
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionBank {
    pub category_names: Vec<String>,
    pub provenance: Provenance,
    table: BTreeMap<usize, BTreeMap<usize, Vec<ConfusionRecord>>>,
}

/// One classified training sample offered to [`build_bank`].
#[derive(Debug, Clone)]
pub struct BankInput {
    pub sample_id: usize,
    pub true_category: usize,
    pub feature: Vec<f64>,
    pub confidences: Vec<f64>,
}

pub trait Classifier {
    fn name(&self) -> String;
    fn confidences(&self, world: &World, sample_id: usize, tau: f64) -> Result<Vec<f64>>;
}

/// The frozen zero-shot classifier, optionally restricted to a candidate
/// category set (other categories get probability 0).
pub struct BaselineClassifier {
    pub candidates: Option<Vec<usize>>,
    text: capt_numerics::Tensor,
}

impl BaselineClassifier {
    pub fn new(world: &World, candidates: Option<Vec<usize>>) -> Result<Self> {
        Ok(Self {
            candidates,
            text: world.category_text_features()?,
        })
    }
}

impl Classifier for BaselineClassifier {
    fn name(&self) -> String {
        match &self.candidates {
            None => "baseline".into(),
            Some(c) => format!("baseline[{} candidates]", c.len()),
        }
    }

    fn confidences(&self, world: &World, sample_id: usize, tau: f64) -> Result<Vec<f64>> {
        let (_, f) = world.encode_image(sample_id)?;
        restricted_confidences(&f, &self.text, self.candidates.as_deref(), tau)
    }
}

/// Temperature softmax over `text` rows, zero outside `candidates`.
pub fn restricted_confidences(
    f: &[f64],
    text: &capt_numerics::Tensor,
    candidates: Option<&[usize]>,
    tau: f64,
) -> Result<Vec<f64>> {
    let n = text.rows();
    let mut sims = vec![f64::NEG_INFINITY; n];
    let all: Vec<usize>;
    let cands = match candidates {
        Some(c) => c,
        None => {
            all = (0..n).collect();
            &all
        }
    };
    for &c in cands {
        sims[c] = capt_numerics::cosine_similarity(f, text.row(c))?;
    }
    let sub: Vec<f64> = cands.iter().map(|&c| sims[c]).collect();
    let p = capt_numerics::softmax_vec(&sub, tau)?;
    let mut out = vec![0.0; n];
    for (&c, v) in cands.iter().zip(p) {
        out[c] = v;
    }
    Ok(out)
}

pub fn build_bank(
    num_categories: usize,
    category_names: Vec<String>,
    inputs: impl IntoIterator<Item = BankInput>,
    provenance: Provenance,
) -> Result<ConfusionBank> {
    let mut bank = ConfusionBank::empty(num_categories, category_names, provenance);
    let mut seen = 0;
    for inp in inputs {
        seen += 1;
        if inp.true_category >= num_categories || inp.confidences.len() != num_categories {
            return Err(BankError::Config(format!(
                "sample {} does not fit {num_categories} categories",
                inp.sample_id
            )));
        }
        let pred = argmax(&inp.confidences);
        if pred != inp.true_category {
            bank.insert(ConfusionRecord {
                sample_id: inp.sample_id,
                pseudo_gt: pred,
                true_category: inp.true_category,
                feature: capt_numerics::normalized(&inp.feature),
            })?;
        }
    }
    if seen == 0 {
        return Err(BankError::Config("empty training set".into()));
    }
    Ok(bank)
}

/// Classifies `sample_ids` with `classifier` and files the mistakes.
pub fn build_from_world(
    world: &World,
    classifier: &dyn Classifier,
    sample_ids: &[usize],
    tau: f64,
    seed: u64,
    timestamp: &str,
) -> Result<ConfusionBank> {
    let inputs = sample_ids
        .iter()
        .map(|&id| {
            let (_, f) = world.encode_image(id)?;
            Ok(BankInput {
                sample_id: id,
                true_category: world.sample(id)?.label,
                feature: f,
                confidences: classifier.confidences(world, id, tau)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    build_bank(
        world.num_categories(),
        world.names.clone(),
        inputs,
        Provenance {
            builder: classifier.name(),
            seed,
            timestamp: timestamp.to_string(),
        },
    )
}

impl ConfusionBank {
    pub fn empty(num_categories: usize, category_names: Vec<String>, provenance: Provenance) -> Self {
        Self {
            category_names: if category_names.len() == num_categories {
                category_names
            } else {
                (0..num_categories).map(|i| format!("class_{i:03}")).collect()
            },
            provenance,
            table: BTreeMap::new(),
        }
    }

    pub fn num_categories(&self) -> usize {
        self.category_names.len()
    }

    /// Files a record under (pseudo_gt, true_category); insertion order is kept.
    pub fn insert(&mut self, rec: ConfusionRecord) -> Result<()> {
        let n = self.num_categories();
        if rec.pseudo_gt >= n || rec.true_category >= n || rec.pseudo_gt == rec.true_category {
            return Err(BankError::Config(format!(
                "record for sample {} has keys ({}, {}) in a {n}-category bank",
                rec.sample_id, rec.pseudo_gt, rec.true_category
            )));
        }
        self.table
            .entry(rec.pseudo_gt)
            .or_default()
            .entry(rec.true_category)
            .or_default()
            .push(rec);
        Ok(())
    }

    /// n_i for every category i under `pseudo_gt` (zeros when absent).
    pub fn counts(&self, pseudo_gt: usize) -> Vec<usize> {
        let mut out = vec![0; self.num_categories()];
        if let Some(m) = self.table.get(&pseudo_gt) {
            for (&c, v) in m {
                if c < out.len() {
                    out[c] = v.len();
                }
            }
        }
        out
    }

    pub fn retrieve(&self, pseudo_gt: usize, category: usize) -> &[ConfusionRecord] {
        self.table
            .get(&pseudo_gt)
            .and_then(|m| m.get(&category))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn records_under(&self, pseudo_gt: usize) -> impl Iterator<Item = &ConfusionRecord> {
        self.table.get(&pseudo_gt).into_iter().flat_map(|m| m.values().flatten())
    }

    pub fn records(&self) -> impl Iterator<Item = &ConfusionRecord> {
        self.table.values().flat_map(|m| m.values().flatten())
    }

    pub fn len(&self) -> usize {
        self.records().count()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// matrix[true][predicted] counts of the stored mistakes.
    pub fn confusion_matrix(&self) -> Vec<Vec<usize>> {
        let n = self.num_categories();
        let mut m = vec![vec![0; n]; n];
        for r in self.records() {
            m[r.true_category][r.pseudo_gt] += 1;
        }
        m
    }

    /// Union of two banks built by the same builder.
    pub fn merge(&self, other: &ConfusionBank) -> Result<ConfusionBank> {
        if self.provenance != other.provenance {
            return Err(BankError::ProvenanceMismatch(
                self.provenance.clone(),
                other.provenance.clone(),
            ));
        }
        if self.num_categories() != other.num_categories() {
            return Err(BankError::Config("category counts differ".into()));
        }
        let mut out = self.clone();
        for r in other.records() {
            out.insert(r.clone())?;
        }
        Ok(out)
    }

    pub fn checksum(&self) -> String {
        Sha256::digest(self.to_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(BANK_MAGIC);
        w.u32(BANK_VERSION);
        w.str(&self.provenance.builder);
        w.u64(self.provenance.seed);
        w.str(&self.provenance.timestamp);
        w.u64(self.category_names.len() as u64);
        for n in &self.category_names {
            w.str(n);
        }
        w.u64(self.table.len() as u64);
        for (&pg, m) in &self.table {
            w.u64(pg as u64);
            w.u64(m.len() as u64);
            for (&c, recs) in m {
                w.u64(c as u64);
                w.u64(recs.len() as u64);
                for r in recs {
                    w.u64(r.sample_id as u64);
                    w.f64s(&r.feature);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<ConfusionBank, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(BANK_MAGIC)?;
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(FormatError {
                offset: 8,
                message: format!("unsupported bank version {version}"),
            });
        }
        let provenance = Provenance {
            builder: r.str()?,
            seed: r.u64()?,
            timestamp: r.str()?,
        };
        let n_names = r.len_prefix(8)?;
        let names = (0..n_names).map(|_| r.str()).collect::<std::result::Result<Vec<_>, _>>()?;
        let nc = names.len();
        let mut bank = ConfusionBank::empty(nc, names, provenance);
        let n_pg = r.len_prefix(16)?;
        let mut last_pg = None;
        for _ in 0..n_pg {
            let at = r.offset();
            let pg = r.usize()?;
            if pg >= nc || last_pg.is_some_and(|l| l >= pg) {
                return Err(FormatError { offset: at, message: format!("bad pseudo-GT key {pg}") });
            }
            last_pg = Some(pg);
            let n_c = r.len_prefix(16)?;
            if n_c == 0 {
                return Err(r.error("empty category block"));
            }
            let mut last_c = None;
            for _ in 0..n_c {
                let at = r.offset();
                let c = r.usize()?;
                if c >= nc || c == pg || last_c.is_some_and(|l| l >= c) {
                    return Err(FormatError { offset: at, message: format!("bad category key {c}") });
                }
                last_c = Some(c);
                let n_r = r.len_prefix(16)?;
                if n_r == 0 {
                    return Err(r.error("empty record list"));
                }
                for _ in 0..n_r {
                    let sample_id = r.usize()?;
                    let at = r.offset();
                    let feature = r.f64s()?;
                    if feature.is_empty() || (l2_norm(&feature) - 1.0).abs() > 1e-9 {
                        return Err(FormatError { offset: at, message: "stored feature is not unit-norm".into() });
                    }
                    bank.insert(ConfusionRecord {
                        sample_id,
                        pseudo_gt: pg,
                        true_category: c,
                        feature,
                    })
                    .map_err(|e| FormatError { offset: at, message: e.to_string() })?;
                }
            }
        }
        r.finish()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| BankError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<ConfusionBank> {
        let bytes = std::fs::read(path).map_err(|source| BankError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        ConfusionBank::from_bytes(&bytes).map_err(|source| BankError::Format {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Human-readable export (counts per key plus provenance).
    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Entry<'a> {
            pseudo_gt: &'a str,
            category: &'a str,
            count: usize,
            sample_ids: Vec<usize>,
        }
        let mut entries = Vec::new();
        for (&pg, m) in &self.table {
            for (&c, recs) in m {
                entries.push(Entry {
                    pseudo_gt: &self.category_names[pg],
                    category: &self.category_names[c],
                    count: recs.len(),
                    sample_ids: recs.iter().map(|r| r.sample_id).collect(),
                });
            }
        }
        serde_json::json!({
            "provenance": self.provenance,
            "num_categories": self.num_categories(),
            "records": self.len(),
            "entries": entries,
        })
    }
}
