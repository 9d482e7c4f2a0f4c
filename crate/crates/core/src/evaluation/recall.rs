//! Recall@k within N neighbours (R@k/N).
//!
//! For each generated text: find its corresponding reference, take the N
//! references nearest in time to that reference (itself included, distance
//! ties broken by lower index), rank the pool by similarity to the generated
//! text (ties broken by temporal proximity, then index) and count a hit when
//! the corresponding reference is among the top k. The score is the mean hit
//! rate.

use serde::{Deserialize, Serialize};

use super::similarity::TextSimilarity;
use super::EvalError;
use crate::feature_store::TimedText;

/// How generated items are matched to their reference item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Slot pairing when every generated interval coincides with the
    /// reference at the same index, nearest midpoint otherwise.
    #[default]
    Auto,
    /// Generated item i corresponds to reference item i.
    SameSlot,
    /// Nearest reference by interval midpoint, lower index on ties.
    NearestMidpoint,
}

const SLOT_EPS: f64 = 1e-6;

pub fn corresponding_references(
    generated: &[TimedText],
    reference: &[TimedText],
    pairing: Pairing,
) -> Result<Vec<usize>, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let same_slots = generated.len() == reference.len()
        && generated.iter().zip(reference).all(|(g, r)| {
            (g.start_s - r.start_s).abs() < SLOT_EPS && (g.end_s - r.end_s).abs() < SLOT_EPS
        });
    let use_slots = match pairing {
        Pairing::SameSlot => {
            if generated.len() != reference.len() {
                return Err(EvalError::LengthMismatch(format!(
                    "slot pairing needs equal lengths, got {} and {}",
                    generated.len(),
                    reference.len()
                )));
            }
            true
        }
        Pairing::NearestMidpoint => false,
        Pairing::Auto => same_slots,
    };
    if use_slots {
        return Ok((0..generated.len()).collect());
    }
    Ok(generated
        .iter()
        .map(|g| {
            let m = g.midpoint();
            let mut best = 0;
            for (j, r) in reference.iter().enumerate() {
                if (r.midpoint() - m).abs() < (reference[best].midpoint() - m).abs() {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// The `n` references closest in time to `center`, nearest first. The center
/// always leads, even when other references share its midpoint.
pub fn neighbour_pool(midpoints: &[f64], center: usize, n: usize) -> Vec<usize> {
    let c = midpoints[center];
    let mut idx: Vec<usize> = (0..midpoints.len()).collect();
    idx.sort_by(|&a, &b| {
        (a != center)
            .cmp(&(b != center))
            .then((midpoints[a] - c).abs().total_cmp(&(midpoints[b] - c).abs()))
            .then(a.cmp(&b))
    });
    idx.truncate(n);
    idx
}

/// Core of the metric on precomputed pairings and a similarity callback
/// `sim(generated_index, reference_index)`.
pub fn recall_from_fn(
    reference_midpoints: &[f64],
    correspondence: &[usize],
    k: usize,
    n: usize,
    mut sim: impl FnMut(usize, usize) -> f64,
) -> Result<f64, EvalError> {
    if k == 0 || k > n {
        return Err(EvalError::InvalidKN { k, n });
    }
    if reference_midpoints.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    if correspondence.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (g, &c) in correspondence.iter().enumerate() {
        let pool = neighbour_pool(reference_midpoints, c, n);
        let center = reference_midpoints[c];
        let mut ranked: Vec<(f64, f64, usize)> = pool
            .iter()
            .map(|&j| (sim(g, j), (reference_midpoints[j] - center).abs(), j))
            .collect();
        ranked.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        if ranked.iter().take(k).any(|&(_, _, j)| j == c) {
            hits += 1;
        }
    }
    Ok(hits as f64 / correspondence.len() as f64)
}

pub fn recall_at_k_within_n(
    generated: &[TimedText],
    reference: &[TimedText],
    k: usize,
    n: usize,
    sim: &dyn TextSimilarity,
    pairing: Pairing,
) -> Result<f64, EvalError> {
    if k == 0 || k > n {
        return Err(EvalError::InvalidKN { k, n });
    }
    let correspondence = corresponding_references(generated, reference, pairing)?;
    let mids: Vec<f64> = reference.iter().map(TimedText::midpoint).collect();
    recall_from_fn(&mids, &correspondence, k, n, |g, j| {
        sim.similarity(&generated[g].text, &reference[j].text)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::similarity::ExactMatch;
    use crate::feature_store::TextKind;

    fn tt(s: f64, e: f64, text: &str) -> TimedText {
        TimedText::new(s, e, TextKind::Ad, text).unwrap()
    }

    #[test]
    fn k_equal_n_is_one() {
        let refs: Vec<_> = (0..6).map(|i| tt(i as f64, i as f64 + 1.0, &format!("r{i}"))).collect();
        let gens: Vec<_> = (0..6).map(|i| tt(i as f64, i as f64 + 1.0, "zzz")).collect();
        for n in 1..=6 {
            assert_eq!(recall_at_k_within_n(&gens, &refs, n, n, &ExactMatch, Pairing::Auto).unwrap(), 1.0);
        }
    }

    #[test]
    fn exact_copies_hit_at_one() {
        let refs: Vec<_> = (0..20).map(|i| tt(i as f64 * 3.0, i as f64 * 3.0 + 2.0, &format!("sentence {i}"))).collect();
        let gens = refs.clone();
        assert_eq!(recall_at_k_within_n(&gens, &refs, 1, 16, &ExactMatch, Pairing::Auto).unwrap(), 1.0);
    }

    #[test]
    fn nearest_midpoint_pairing() {
        let refs = vec![tt(0.0, 2.0, "a"), tt(10.0, 12.0, "b")];
        let gens = vec![tt(8.0, 9.0, "b"), tt(0.5, 1.0, "a")];
        let c = corresponding_references(&gens, &refs, Pairing::Auto).unwrap();
        assert_eq!(c, vec![1, 0]);
    }

    #[test]
    fn invalid_kn() {
        let refs = vec![tt(0.0, 1.0, "a")];
        assert!(matches!(
            recall_at_k_within_n(&refs, &refs, 3, 2, &ExactMatch, Pairing::Auto),
            Err(EvalError::InvalidKN { k: 3, n: 2 })
        ));
        assert!(matches!(
            recall_at_k_within_n(&refs, &[], 1, 2, &ExactMatch, Pairing::Auto),
            Err(EvalError::EmptyReference)
        ));
    }
}
