//! Static token embeddings and BERTScore-style greedy matching.
//!
//! Hashed embeddings carry a shared constant component of weight `γ`, so the
//! cosine of two hashed tokens is `γ + (1 − γ)·cos₃` where `cos₃` is the
//! cosine of their boundary-marked character 3-gram count vectors.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_SHARED_WEIGHT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EmbeddingMode {
    HashedNgram,
    WordvecFile,
}

/// Deterministic token embedder. Every returned vector has unit norm.
#[derive(Clone, Debug)]
pub struct EmbeddingProvider {
    name: String,
    dim: usize,
    mode: EmbeddingMode,
    shared_weight: f64,
    table: HashMap<String, Vec<f64>>,
}

impl Default for EmbeddingProvider {
    fn default() -> Self {
        EmbeddingProvider::hashed(DEFAULT_DIM, DEFAULT_SHARED_WEIGHT)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Character 3-grams of `<token>`; tokens shorter than one gram yield the
/// whole marked string.
pub fn char_trigrams(token: &str) -> Vec<String> {
    let marked: Vec<char> = format!("<{token}>").chars().collect();
    if marked.len() < 3 {
        return vec![marked.iter().collect()];
    }
    marked.windows(3).map(|w| w.iter().collect()).collect()
}

/// Bucket of a 3-gram in a hashed embedding of dimension `dim`. Bucket 0 is
/// reserved for the shared component.
pub fn ngram_bucket(gram: &str, dim: usize) -> usize {
    1 + (fnv1a(gram.as_bytes()) % (dim as u64 - 1)) as usize
}

impl EmbeddingProvider {
    /// Hashed character-3-gram embeddings. `shared_weight` is `γ ∈ [0, 1)`.
    pub fn hashed(dim: usize, shared_weight: f64) -> Self {
        assert!(dim >= 2, "hashed embeddings need at least 2 dimensions");
        assert!((0.0..1.0).contains(&shared_weight), "shared weight must lie in [0, 1)");
        EmbeddingProvider {
            name: format!("hashed-ngram-{dim}"),
            dim,
            mode: EmbeddingMode::HashedNgram,
            shared_weight,
            table: HashMap::new(),
        }
    }

    /// Uses `vectors` for known tokens and hashed embeddings of the same
    /// dimension for the rest. Vectors are L2-normalized on entry.
    pub fn from_vectors(name: &str, vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        let dim = vectors
            .values()
            .next()
            .map(Vec::len)
            .ok_or(Error::Empty("word vector table"))?;
        if dim < 2 {
            return Err(Error::Validation("word vectors need at least 2 dimensions".into()));
        }
        let mut table = HashMap::with_capacity(vectors.len());
        for (tok, mut v) in vectors {
            if v.len() != dim {
                return Err(Error::Validation(format!(
                    "vector for {tok:?} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            normalize(&mut v).ok_or_else(|| Error::Validation(format!("zero vector for {tok:?}")))?;
            table.insert(tok, v);
        }
        Ok(EmbeddingProvider {
            name: name.to_string(),
            dim,
            mode: EmbeddingMode::WordvecFile,
            shared_weight: DEFAULT_SHARED_WEIGHT,
            table,
        })
    }

    /// Loads a plain-text vector file: one `token v1 … vD` entry per line.
    /// A leading `count dim` header line is skipped.
    pub fn load_wordvec(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let values = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| parse_err(e.to_string()))?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(parse_err(format!("expected {d} values, got {}", values.len())))
                }
                _ => {}
            }
            if values.len() < 2 || values.iter().all(|v| *v == 0.0) {
                return Err(parse_err("vector must have ≥2 non-zero-norm components".into()));
            }
            vectors.insert(fields[0].to_string(), values);
        }
        let name = path.file_name().map_or_else(|| "wordvec".into(), |n| n.to_string_lossy().into_owned());
        EmbeddingProvider::from_vectors(&name, vectors)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> EmbeddingMode {
        self.mode
    }

    pub fn embed(&self, token: &str) -> Vec<f64> {
        if let Some(v) = self.table.get(token) {
            return v.clone();
        }
        self.hashed_vector(token)
    }

    fn hashed_vector(&self, token: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for g in char_trigrams(token) {
            v[ngram_bucket(&g, self.dim)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = (1.0 - self.shared_weight).sqrt() / norm;
        for x in v.iter_mut() {
            *x *= scale;
        }
        v[0] = self.shared_weight.sqrt();
        v
    }
}

fn normalize(v: &mut [f64]) -> Option<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Some(())
}

pub fn embed_tokens<S: AsRef<str>>(tokens: &[S], provider: &EmbeddingProvider) -> Vec<Vec<f64>> {
    tokens.iter().map(|t| provider.embed(t.as_ref())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SimScore {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        SimScore {
            precision,
            recall,
            f1,
        }
    }

    /// Affine baseline rescaling `(s − b)/(1 − b)` applied to each field.
    pub fn rescaled(&self, baseline: f64) -> SimScore {
        let f = |s: f64| (s - baseline) / (1.0 - baseline);
        SimScore {
            precision: f(self.precision),
            recall: f(self.recall),
            f1: f(self.f1),
        }
    }
}

/// Greedy max-cosine matching over pre-computed unit vectors.
pub fn bertscore_embedded(candidate: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<SimScore> {
    if candidate.is_empty() {
        return Err(Error::Empty("candidate tokens"));
    }
    if reference.is_empty() {
        return Err(Error::Empty("reference tokens"));
    }
    let mut best_for_ref = vec![f64::NEG_INFINITY; reference.len()];
    let mut precision = 0.0;
    for c in candidate {
        let mut best = f64::NEG_INFINITY;
        for (j, r) in reference.iter().enumerate() {
            let s = crate::diffmath::dot(c, r);
            best = best.max(s);
            best_for_ref[j] = best_for_ref[j].max(s);
        }
        precision += best;
    }
    let precision = precision / candidate.len() as f64;
    let recall = best_for_ref.iter().sum::<f64>() / reference.len() as f64;
    Ok(SimScore::new(precision, recall))
}

pub fn bertscore<S: AsRef<str>, T: AsRef<str>>(
    candidate: &[S],
    reference: &[T],
    provider: &EmbeddingProvider,
) -> Result<SimScore> {
    bertscore_embedded(&embed_tokens(candidate, provider), &embed_tokens(reference, provider))
}
