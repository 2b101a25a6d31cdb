//! Hashed bag-of-tokens text features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Pseudo-random Gaussian vector keyed by the token's SHA-256.
pub fn token_vector(token: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(token.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .map(|v: f64| v * scale)
        .collect()
}

/// Sum of token vectors; `None` when the text has no tokens.
pub fn bag(text: &str, dim: usize) -> Option<Vec<f64>> {
    let toks = tokenize(text);
    if toks.is_empty() {
        return None;
    }
    let mut out = vec![0.0; dim];
    for t in &toks {
        for (o, v) in out.iter_mut().zip(token_vector(t, dim)) {
            *o += v;
        }
    }
    Some(out)
}

const NAMES: [&str; 32] = [
    "terrier", "bulldog", "tabby", "lynx", "heron", "egret", "falcon", "kestrel",
    "trout", "salmon", "maple", "sycamore", "tulip", "lily", "violin", "viola",
    "canoe", "kayak", "hammer", "mallet", "teapot", "kettle", "lantern", "torch",
    "barn", "silo", "comet", "meteor", "glacier", "iceberg", "cactus", "agave",
];

pub fn category_name(i: usize) -> String {
    NAMES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("class_{i:03}"))
}

pub fn category_prompt(name: &str) -> String {
    format!("a photo of a {name}")
}
