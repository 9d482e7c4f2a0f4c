//! Captioning, retrieval and classifier metrics.
//!
//! Scores are returned in `[0, 1]` (CIDEr in its native scale); reports
//! multiply by 100.

pub mod cider;
pub mod classification;
pub mod recall;
pub mod rouge;
pub mod similarity;
pub mod stats;

use thiserror::Error;

pub use cider::{cider, CiderScorer};
pub use classification::{average_precision, roc_auc, roc_auc_ap};
pub use recall::{recall_at_k_within_n, Pairing};
pub use rouge::rouge_l;
pub use similarity::{BertScoreStyle, EmbeddingCosine, ExactMatch, SimilarityBackend, TextSimilarity, WordEmbeddings};
pub use stats::{corpus_stats, CorpusStats, NerTag, AD_PRONOUNS, SUBTITLE_PRONOUNS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no reference texts")]
    EmptyReference,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid k={k}, N={n}: need 1 <= k <= N")]
    InvalidKN { k: usize, n: usize },
    #[error("only one class present{}", group.map(|g| format!(" in group {g}")).unwrap_or_default())]
    SingleClass { group: Option<usize> },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("embedding table error: {0}")]
    Table(String),
}

/// Lowercased, punctuation-stripped, whitespace-split tokens.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '\'' || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Normalized text: metric tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    metric_tokens(text).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenization_strips_punctuation() {
        assert_eq!(metric_tokens("He opens the door. She's  gone!"), vec!["he", "opens", "the", "door", "she's", "gone"]);
        assert!(metric_tokens(" ... ").is_empty());
    }
}
