//! Metric suite against independent oracles and reference-toolkit goldens.

mod common;

use common::*;
use autoad_core::evaluation::cider::cider;
use autoad_core::evaluation::classification::{average_precision, roc_auc, roc_auc_ap};
use autoad_core::evaluation::recall::{corresponding_references, recall_from_fn, Pairing};
use autoad_core::evaluation::{recall_at_k_within_n, rouge_l, ExactMatch};
use autoad_core::feature_store::{TextKind, TimedText};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn rouge_and_cider_match_reference_toolkit() {
    let g = golden();
    assert_eq!(g.fixtures.len(), 20);
    for (fi, f) in g.fixtures.iter().enumerate() {
        let cands: Vec<&str> = f.items.iter().map(|i| i.candidate.as_str()).collect();
        let refs: Vec<Vec<&str>> = f.items.iter().map(|i| i.references.iter().map(String::as_str).collect()).collect();
        for (i, it) in f.items.iter().enumerate() {
            let r = rouge_l(&it.candidate, &it.references).unwrap();
            assert!((r - f.rouge_l[i]).abs() < 1e-4, "fixture {fi} item {i}: rouge {r} vs {}", f.rouge_l[i]);
        }
        let c = cider(&cands, &refs).unwrap();
        assert!((c.mean - f.cider_mean).abs() < 1e-4, "fixture {fi}: cider {} vs {}", c.mean, f.cider_mean);
        for (i, (a, b)) in c.per_item.iter().zip(&f.cider).enumerate() {
            assert!((a - b).abs() < 1e-4, "fixture {fi} item {i}: cider {a} vs {b}");
        }
    }
}

#[test]
fn rouge_hand_computed() {
    // LCS 2 of 3 on both sides: P = R = 2/3, so F = 2/3 for any beta.
    let r = rouge_l("the cat sat", &["the cat ran"]).unwrap();
    assert!((r - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(rouge_l("a b c", &["x y z"]).unwrap(), 0.0);
    assert_eq!(rouge_l("", &["x y z"]).unwrap(), 0.0);
}

#[test]
fn recall_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for inst in 0..50 {
        let (mids, corr, sim) = random_instance(&mut rng);
        let m = mids.len();
        let n = rng.random_range(1..=m);
        let k = rng.random_range(1..=n);
        let got = recall_from_fn(&mids, &corr, k, n, |g, j| sim[g][j]).unwrap();
        let want = oracle_recall(&mids, &corr, &sim, k, n);
        assert_eq!(got, want, "instance {inst}: k={k} n={n} mids={mids:?} corr={corr:?}");
    }
}

#[test]
fn toy_sequence_value() {
    // Five references one second apart; generated item i pairs with slot i.
    let mids = [0.5, 1.5, 2.5, 3.5, 4.5];
    let sim = vec![
        vec![0.9, 0.1, 0.2, 0.0, 0.0],
        vec![0.8, 0.7, 0.1, 0.0, 0.0],
        vec![0.0, 0.5, 0.5, 0.5, 0.0],
        vec![0.0, 0.0, 0.1, 0.2, 0.9],
        vec![0.3, 0.3, 0.3, 0.3, 0.3],
    ];
    let corr = [0, 1, 2, 3, 4];
    let got = recall_from_fn(&mids, &corr, 1, 3, |g, j| sim[g][j]).unwrap();
    // Hits: item 0 (top), item 2 (tie broken by proximity), item 4 (all tie,
    // nearest is itself); misses: items 1 and 3.
    assert_eq!(got, 0.6);
    assert_eq!(got, oracle_recall(&mids, &corr, &sim, 1, 3));
}

fn tt(a: f64, b: f64, s: &str) -> TimedText {
    TimedText::new(a, b, TextKind::Ad, s).unwrap()
}

#[test]
fn nearest_midpoint_pairing_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let m = rng.random_range(1..6);
        let refs: Vec<TimedText> = (0..m).map(|i| tt(i as f64 * 2.0, i as f64 * 2.0 + 1.0, "r")).collect();
        let gens: Vec<TimedText> = (0..4)
            .map(|_| {
                let a = rng.random_range(0..20) as f64 * 0.5;
                tt(a, a + 1.0, "g")
            })
            .collect();
        let got = corresponding_references(&gens, &refs, Pairing::NearestMidpoint).unwrap();
        for (g, &c) in gens.iter().zip(&got) {
            let d: Vec<f64> = refs.iter().map(|r| (r.midpoint() - g.midpoint()).abs()).collect();
            let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let first = d.iter().position(|&x| x == best).unwrap();
            assert_eq!(c, first);
        }
    }
}

#[test]
fn recall_full_pool_and_monotone_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let (mids, corr, sim) = random_instance(&mut rng);
        let m = mids.len();
        let f = |k, n| recall_from_fn(&mids, &corr, k, n, |g, j| sim[g][j]).unwrap();
        for n in 1..=m {
            assert_eq!(f(n, n), 1.0);
            for k in 1..n {
                assert!(f(k, n) <= f(k + 1, n));
            }
        }
    }
}

#[test]
fn auc_ap_match_bruteforce_on_twenty_item_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let y: Vec<bool> = (0..20).map(|i| i % 3 == 0 || rng.random_bool(0.3)).collect();
        let s: Vec<f64> = (0..20).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        assert!((roc_auc(&s, &y).unwrap() - oracle_auc(&s, &y)).abs() < 1e-9);
        assert!((average_precision(&s, &y).unwrap() - oracle_ap(&s, &y)).abs() < 1e-9);
    }
}

#[test]
fn auc_ap_edge_cases() {
    let y = [true, true, false, false];
    assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &y).unwrap(), 1.0);
    assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &y).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.5; 4], &y).unwrap(), 0.5);
    assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    let groups = [0, 0, 1, 1];
    assert!(roc_auc_ap(&[0.1, 0.2, 0.3, 0.4], &[true, false, true, true], Some(&groups)).is_err());
    let (auc, _) = roc_auc_ap(&[0.9, 0.1, 0.2, 0.8], &[true, false, false, true], Some(&groups)).unwrap();
    assert_eq!(auc, 1.0);
}

proptest! {
    #[test]
    fn rouge_self_is_one(words in prop::collection::vec("[a-z]{1,6}", 1..12)) {
        let a = words.join(" ");
        prop_assert!((rouge_l(&a, &[&a]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_ap_invariant_to_monotone_transform(
        pairs in prop::collection::vec((0u8..10, any::<bool>()), 2..40),
        scale in 0.1f64..10.0,
    ) {
        let y: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
        let s: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let t: Vec<f64> = s.iter().map(|v| (scale * v).exp() - 3.0).collect();
        prop_assert!((roc_auc(&s, &y).unwrap() - roc_auc(&t, &y).unwrap()).abs() < 1e-12);
        prop_assert!((average_precision(&s, &y).unwrap() - average_precision(&t, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn recall_monotone_and_transform_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mids, corr, sim) = random_instance(&mut rng);
        let m = mids.len();
        let f = |k, n, t: &dyn Fn(f64) -> f64| recall_from_fn(&mids, &corr, k, n, |g, j| t(sim[g][j])).unwrap();
        let id = |x: f64| x;
        let warp = |x: f64| x * x * x + 2.0 * x;
        for n in 1..=m {
            for k in 1..=n {
                prop_assert_eq!(f(k, n, &id), f(k, n, &warp));
                if k < n {
                    prop_assert!(f(k, n, &id) <= f(k + 1, n, &id));
                }
                if n < m {
                    prop_assert!(f(k, n + 1, &id) <= f(k, n, &id));
                }
            }
        }
    }
}

#[test]
fn exact_copies_score_one_at_one() {
    let refs: Vec<TimedText> = (0..20).map(|i| tt(i as f64 * 3.0, i as f64 * 3.0 + 2.0, &format!("line {i}"))).collect();
    assert_eq!(recall_at_k_within_n(&refs, &refs, 1, 16, &ExactMatch, Pairing::Auto).unwrap(), 1.0);
}
