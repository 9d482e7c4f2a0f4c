use super::{metric_tokens, EvalError};

/// Recall weight of the F-measure, as in the COCO caption toolkit.
pub const ROUGE_BETA: f64 = 1.2;

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure of `candidate` against the best-matching references.
///
/// Precision and recall are each maximized over references before combining.
/// An empty candidate scores 0.
pub fn rouge_l<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<f64, EvalError> {
    if references.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let cand = metric_tokens(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut prec_max = 0.0f64;
    let mut rec_max = 0.0f64;
    for r in references {
        let r = metric_tokens(r.as_ref());
        if r.is_empty() {
            continue;
        }
        let lcs = lcs_len(&r, &cand) as f64;
        prec_max = prec_max.max(lcs / cand.len() as f64);
        rec_max = rec_max.max(lcs / r.len() as f64);
    }
    if prec_max == 0.0 || rec_max == 0.0 {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * prec_max * rec_max / (rec_max + b2 * prec_max))
}

/// Mean ROUGE-L over aligned candidate/reference lists.
pub fn corpus_rouge_l<S: AsRef<str>>(candidates: &[S], references: &[Vec<S>]) -> Result<f64, EvalError> {
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
    let mut total = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        total += rouge_l(c.as_ref(), r)?;
    }
    Ok(total / candidates.len() as f64)
}
