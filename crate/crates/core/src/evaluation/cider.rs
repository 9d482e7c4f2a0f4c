//! CIDEr-D as implemented by the COCO caption evaluation toolkit.
//!
//! Document frequencies come from the reference sets of the scored corpus.
//! Details kept for compatibility: n-grams with zero document frequency use
//! idf `ln(corpus size)`, the length penalty counts bigrams, clipping uses
//! `min(hyp, ref)` tf-idf and the final score is scaled by 10.

use std::collections::HashMap;

use super::{metric_tokens, EvalError};

pub const CIDER_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

type Counts = HashMap<Vec<String>, usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts {
    let mut counts = Counts::new();
    for k in 1..=n {
        if tokens.len() < k {
            break;
        }
        for w in tokens.windows(k) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

struct TfIdf {
    vec: Vec<HashMap<Vec<String>, f64>>,
    norm: Vec<f64>,
    length: usize,
}

#[derive(Debug, Clone)]
pub struct CiderScorer {
    doc_freq: HashMap<Vec<String>, f64>,
    ref_len: f64,
    n: usize,
    sigma: f64,
}

impl CiderScorer {
    /// Builds document frequencies from per-item reference sets.
    pub fn new<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<Self, EvalError> {
        if corpus.is_empty() {
            return Err(EvalError::EmptyCorpus);
        }
        let mut doc_freq = HashMap::new();
        for refs in corpus {
            let mut seen: std::collections::HashSet<Vec<String>> = Default::default();
            for r in refs {
                for g in ngram_counts(&metric_tokens(r.as_ref()), CIDER_N).into_keys() {
                    seen.insert(g);
                }
            }
            for g in seen {
                *doc_freq.entry(g).or_insert(0.0) += 1.0;
            }
        }
        Ok(Self {
            doc_freq,
            ref_len: (corpus.len() as f64).ln(),
            n: CIDER_N,
            sigma: CIDER_SIGMA,
        })
    }

    fn tfidf(&self, counts: &Counts) -> TfIdf {
        let mut vec = vec![HashMap::new(); self.n];
        let mut norm = vec![0.0; self.n];
        let mut length = 0;
        for (g, &tf) in counts {
            let df = self.doc_freq.get(g).copied().unwrap_or(0.0).max(1.0).ln();
            let idx = g.len() - 1;
            let w = tf as f64 * (self.ref_len - df);
            vec[idx].insert(g.clone(), w);
            norm[idx] += w * w;
            if idx == 1 {
                length += tf;
            }
        }
        TfIdf {
            vec,
            norm: norm.into_iter().map(f64::sqrt).collect(),
            length,
        }
    }

    fn sim(&self, hyp: &TfIdf, reference: &TfIdf) -> Vec<f64> {
        let delta = hyp.length as f64 - reference.length as f64;
        let penalty = (-(delta * delta) / (2.0 * self.sigma * self.sigma)).exp();
        (0..self.n)
            .map(|n| {
                let mut val = 0.0;
                for (g, &h) in &hyp.vec[n] {
                    let r = reference.vec[n].get(g).copied().unwrap_or(0.0);
                    val += h.min(r) * r;
                }
                if hyp.norm[n] != 0.0 && reference.norm[n] != 0.0 {
                    val /= hyp.norm[n] * reference.norm[n];
                }
                val * penalty
            })
            .collect()
    }

    /// Score of one candidate against its references (native scale).
    pub fn score<S: AsRef<str>>(&self, candidate: &str, references: &[S]) -> Result<f64, EvalError> {
        if references.is_empty() {
            return Err(EvalError::EmptyReference);
        }
        let hyp = self.tfidf(&ngram_counts(&metric_tokens(candidate), self.n));
        let mut acc = vec![0.0; self.n];
        for r in references {
            let reference = self.tfidf(&ngram_counts(&metric_tokens(r.as_ref()), self.n));
            for (a, v) in acc.iter_mut().zip(self.sim(&hyp, &reference)) {
                *a += v;
            }
        }
        let mean = acc.iter().sum::<f64>() / self.n as f64;
        Ok(mean / references.len() as f64 * 10.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiderReport {
    pub mean: f64,
    pub per_item: Vec<f64>,
}

/// Corpus CIDEr-D with document frequencies taken from `references`.
pub fn cider<S: AsRef<str>>(candidates: &[S], references: &[Vec<S>]) -> Result<CiderReport, EvalError> {
    let scorer = CiderScorer::new(references)?;
    cider_with_scorer(&scorer, candidates, references)
}

pub fn cider_with_scorer<S: AsRef<str>>(
    scorer: &CiderScorer,
    candidates: &[S],
    references: &[Vec<S>],
) -> Result<CiderReport, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} candidates vs {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let per_item = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| scorer.score(c.as_ref(), r))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = per_item.iter().sum::<f64>() / per_item.len() as f64;
    Ok(CiderReport { mean, per_item })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjoint_scores_zero() {
        let r = cider(
            &["red green blue", "one two three"],
            &[vec!["a b c d"], vec!["e f g h"]],
        )
        .unwrap();
        assert_eq!(r.per_item, vec![0.0, 0.0]);
    }

    #[test]
    fn single_document_corpus_is_finite() {
        let r = cider(&["a man walks"], &[vec!["a man walks"]]).unwrap();
        assert!(r.mean.is_finite());
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn empty_corpus_errors() {
        let c: Vec<&str> = vec![];
        let r: Vec<Vec<&str>> = vec![];
        assert!(matches!(cider(&c, &r), Err(EvalError::EmptyCorpus)));
    }
}
