//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
pub struct Item {
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Deserialize)]
pub struct Fixture {
    pub items: Vec<Item>,
    pub rouge_l: Vec<f64>,
    pub cider: Vec<f64>,
    pub cider_mean: f64,
}

#[derive(Deserialize)]
pub struct Golden {
    pub fixtures: Vec<Fixture>,
}

pub fn golden() -> Golden {
    let raw = include_str!("../fixtures/metric_golden.json");
    serde_json::from_str(raw).unwrap()
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

fn subsets(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0u32..(1 << n))
        .filter(|m| m.count_ones() as usize == size)
        .map(|m| (0..n).filter(|&i| m & (1 << i) != 0).collect())
        .collect()
}

/// Pool: the correct reference plus the size-(N-1) subset of the others whose
/// sorted (distance, index) list is lexicographically smallest. Ranking: the one permutation of the pool in
/// which every adjacent pair is ordered by (sim desc, distance asc, index asc).
pub fn oracle_recall(mids: &[f64], corr: &[usize], sim: &[Vec<f64>], k: usize, n: usize) -> f64 {
    let mut hits = 0;
    for (g, &c) in corr.iter().enumerate() {
        let dist = |j: usize| (mids[j] - mids[c]).abs();
        let key = |s: &Vec<usize>| {
            let mut v: Vec<(f64, usize)> = s.iter().map(|&j| (dist(j), j)).collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            v
        };
        let pool = subsets(mids.len(), n.min(mids.len()))
            .into_iter()
            .filter(|s| s.contains(&c))
            .min_by(|a, b| {
                let (ka, kb) = (key(a), key(b));
                ka.iter()
                    .zip(&kb)
                    .map(|(x, y)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        let before = |a: usize, b: usize| {
            let (sa, sb) = (sim[g][a], sim[g][b]);
            sa > sb || (sa == sb && (dist(a) < dist(b) || (dist(a) == dist(b) && a < b)))
        };
        let ranked = permutations(&pool)
            .into_iter()
            .find(|p| p.windows(2).all(|w| before(w[0], w[1])))
            .unwrap();
        if ranked[..k].contains(&c) {
            hits += 1;
        }
    }
    hits as f64 / corr.len() as f64
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>, Vec<Vec<f64>>) {
    let m = rng.random_range(2..=6);
    // Integer-ish midpoints make distance ties common.
    let mut mids: Vec<f64> = (0..m).map(|_| rng.random_range(0..8) as f64).collect();
    mids.sort_by(f64::total_cmp);
    let g = rng.random_range(1..=5);
    let corr: Vec<usize> = (0..g).map(|_| rng.random_range(0..m)).collect();
    // Coarse similarity levels make score ties common.
    let sim = (0..g).map(|_| (0..m).map(|_| rng.random_range(0..4) as f64 / 3.0).collect()).collect();
    (mids, corr, sim)
}

pub fn oracle_auc(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

pub fn oracle_ap(s: &[f64], y: &[bool]) -> f64 {
    let p = y.iter().filter(|&&v| v).count() as f64;
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = s.iter().zip(y).filter(|(&v, &l)| v >= t && l).count() as f64;
        let all = s.iter().filter(|&&v| v >= t).count() as f64;
        let r = tp / p;
        ap += (r - prev_r) * tp / all;
        prev_r = r;
    }
    ap
}

/// Brute-force calibration: cosine in f64 per frame, then repeated selection
/// of the best remaining frame (lowest index on ties), then the f64 mean.
pub fn oracle_calibration(portrait: &[f32], frames: &[Vec<f32>], k: usize) -> (Vec<f64>, Vec<usize>) {
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
    let pn = dot(portrait, portrait).sqrt();
    let sims: Vec<f64> = frames
        .iter()
        .map(|f| {
            let fn_ = dot(f, f).sqrt();
            if fn_ == 0.0 {
                0.0
            } else {
                dot(portrait, f) / (pn * fn_)
            }
        })
        .collect();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..frames.len() {
            if chosen.contains(&i) {
                continue;
            }
            if best.is_none_or(|b| sims[i] > sims[b]) {
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    let d = portrait.len();
    let mean = (0..d)
        .map(|j| chosen.iter().map(|&i| frames[i][j] as f64).sum::<f64>() / k as f64)
        .collect();
    (mean, chosen)
}
