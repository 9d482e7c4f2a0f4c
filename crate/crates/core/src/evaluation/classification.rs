use std::collections::BTreeMap;

use super::EvalError;

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass { group: None });
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via the rank statistic with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: sum over distinct thresholds of `(R_n - R_{n-1}) * P_n`.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (pos, _) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// ROC-AUC and AP, macro-averaged over `groups` when given.
///
/// Each group must contain both classes.
pub fn roc_auc_ap(scores: &[f64], labels: &[bool], groups: Option<&[usize]>) -> Result<(f64, f64), EvalError> {
    let Some(groups) = groups else {
        return Ok((roc_auc(scores, labels)?, average_precision(scores, labels)?));
    };
    if groups.len() != scores.len() || labels.len() != scores.len() {
        return Err(EvalError::LengthMismatch("scores, labels and groups differ in length".into()));
    }
    let mut by_group: BTreeMap<usize, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for ((&g, &s), &y) in groups.iter().zip(scores).zip(labels) {
        let e = by_group.entry(g).or_default();
        e.0.push(s);
        e.1.push(y);
    }
    if by_group.is_empty() {
        return Err(EvalError::SingleClass { group: None });
    }
    let mut auc = 0.0;
    let mut ap = 0.0;
    for (g, (s, y)) in &by_group {
        let tag = |e: EvalError| match e {
            EvalError::SingleClass { .. } => EvalError::SingleClass { group: Some(*g) },
            other => other,
        };
        auc += roc_auc(s, y).map_err(tag)?;
        ap += average_precision(s, y).map_err(tag)?;
    }
    let n = by_group.len() as f64;
    Ok((auc / n, ap / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let y = [false, false, true, true];
        assert_eq!(roc_auc_ap(&s, &y, None).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn all_tied_scores() {
        let s = [0.5; 6];
        let y = [true, false, false, true, false, false];
        assert_eq!(roc_auc(&s, &y).unwrap(), 0.5);
        assert!((average_precision(&s, &y).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClass { .. })));
        let groups = [0, 0, 1, 1];
        let err = roc_auc_ap(&[0.1, 0.9, 0.3, 0.4], &[false, true, true, true], Some(&groups)).unwrap_err();
        assert!(matches!(err, EvalError::SingleClass { group: Some(1) }));
    }

    #[test]
    fn macro_average_is_unweighted() {
        // group 0: perfect; group 1: reversed.
        let s = [0.1, 0.9, 0.9, 0.8, 0.1];
        let y = [false, true, false, false, true];
        let g = [0, 0, 1, 1, 1];
        let (auc, _) = roc_auc_ap(&s, &y, Some(&g)).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
    }
}
