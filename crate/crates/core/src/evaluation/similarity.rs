//! Text similarity backends for retrieval-style evaluation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{metric_tokens, EvalError};

pub trait TextSimilarity {
    fn name(&self) -> &'static str;
    fn similarity(&self, a: &str, b: &str) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SimilarityBackend {
    ExactMatch,
    EmbeddingCosine,
    BertscoreStyle,
}

impl SimilarityBackend {
    pub fn build(self, table: WordEmbeddings) -> Box<dyn TextSimilarity + Send + Sync> {
        match self {
            Self::ExactMatch => Box::new(ExactMatch),
            Self::EmbeddingCosine => Box::new(EmbeddingCosine::new(table)),
            Self::BertscoreStyle => Box::new(BertScoreStyle::new(table)),
        }
    }
}

/// 1 when the normalized texts are identical, 0 otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatch;

impl TextSimilarity for ExactMatch {
    fn name(&self) -> &'static str {
        "EXACT_MATCH"
    }

    fn similarity(&self, a: &str, b: &str) -> f64 {
        if metric_tokens(a) == metric_tokens(b) {
            1.0
        } else {
            0.0
        }
    }
}

/// Word vectors from a fixture table; unknown words get a deterministic
/// pseudo-random vector derived from a hash of the word.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordEmbeddings {
    pub dim: usize,
    pub words: HashMap<String, Vec<f32>>,
}

impl WordEmbeddings {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            words: HashMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let raw = fs::read(path).map_err(|e| EvalError::Table(format!("{}: {e}", path.display())))?;
        let table: Self = serde_json::from_slice(&raw).map_err(|e| EvalError::Table(e.to_string()))?;
        if let Some((w, v)) = table.words.iter().find(|(_, v)| v.len() != table.dim) {
            return Err(EvalError::Table(format!("vector for {w:?} has length {}", v.len())));
        }
        Ok(table)
    }

    pub fn vector(&self, word: &str) -> Vec<f32> {
        if let Some(v) = self.words.get(word) {
            return v.clone();
        }
        let digest = Sha256::digest(word.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect()
    }
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine between mean word vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingCosine {
    table: WordEmbeddings,
}

impl EmbeddingCosine {
    pub fn new(table: WordEmbeddings) -> Self {
        Self { table }
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let tokens = metric_tokens(text);
        let mut acc = vec![0.0f64; self.table.dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.table.vector(t)) {
                *a += v as f64;
            }
        }
        let n = tokens.len().max(1) as f64;
        acc.into_iter().map(|x| (x / n) as f32).collect()
    }
}

impl TextSimilarity for EmbeddingCosine {
    fn name(&self) -> &'static str {
        "EMBEDDING_COSINE"
    }

    fn similarity(&self, a: &str, b: &str) -> f64 {
        if metric_tokens(a) == metric_tokens(b) {
            return 1.0;
        }
        cos(&self.embed(a), &self.embed(b))
    }
}

/// Greedy token matching F1 over word vectors (no idf weighting).
#[derive(Debug, Clone)]
pub struct BertScoreStyle {
    table: WordEmbeddings,
}

impl BertScoreStyle {
    pub fn new(table: WordEmbeddings) -> Self {
        Self { table }
    }

    fn greedy(&self, from: &[Vec<f32>], to: &[Vec<f32>]) -> f64 {
        let total: f64 = from
            .iter()
            .map(|u| to.iter().map(|v| cos(u, v)).fold(f64::NEG_INFINITY, f64::max))
            .sum();
        total / from.len() as f64
    }
}

impl TextSimilarity for BertScoreStyle {
    fn name(&self) -> &'static str {
        "BERTSCORE_STYLE"
    }

    fn similarity(&self, a: &str, b: &str) -> f64 {
        let ta = metric_tokens(a);
        let tb = metric_tokens(b);
        if ta == tb {
            return 1.0;
        }
        if ta.is_empty() || tb.is_empty() {
            return 0.0;
        }
        let va: Vec<_> = ta.iter().map(|t| self.table.vector(t)).collect();
        let vb: Vec<_> = tb.iter().map(|t| self.table.vector(t)).collect();
        let p = self.greedy(&va, &vb);
        let r = self.greedy(&vb, &va);
        if p + r <= 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_similarity_is_maximal() {
        let table = WordEmbeddings::empty(16);
        let backends: Vec<Box<dyn TextSimilarity>> = vec![
            Box::new(ExactMatch),
            Box::new(EmbeddingCosine::new(table.clone())),
            Box::new(BertScoreStyle::new(table)),
        ];
        let a = "He walks to the car.";
        let b = "She opens a window";
        for s in &backends {
            assert_eq!(s.similarity(a, a), 1.0, "{}", s.name());
            assert!(s.similarity(a, b) < 1.0, "{}", s.name());
            assert!((s.similarity(a, b) - s.similarity(b, a)).abs() < 1e-12);
        }
    }

    #[test]
    fn oov_vectors_are_deterministic() {
        let t = WordEmbeddings::empty(8);
        assert_eq!(t.vector("zebra"), t.vector("zebra"));
        assert_ne!(t.vector("zebra"), t.vector("horse"));
    }
}
