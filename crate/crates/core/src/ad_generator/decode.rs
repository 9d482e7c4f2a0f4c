//! Greedy and beam-search decoding over an arbitrary next-token scorer.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_tokens: usize,
    pub greedy: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_tokens: 30,
            greedy: false,
        }
    }
}

/// Tokens never emitted, plus EOS before the first real token.
#[derive(Debug, Clone)]
pub struct TokenRules {
    pub eos: u32,
    pub banned: Vec<u32>,
}

impl TokenRules {
    fn apply(&self, logp: &mut [f32], step: usize) {
        for &b in &self.banned {
            if let Some(v) = logp.get_mut(b as usize) {
                *v = f32::NEG_INFINITY;
            }
        }
        if step == 0 {
            if let Some(v) = logp.get_mut(self.eos as usize) {
                *v = f32::NEG_INFINITY;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, without the terminating EOS.
    pub tokens: Vec<u32>,
    pub score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub best: Hypothesis,
    /// Scores of all returned beams, best first.
    pub beam_scores: Vec<f64>,
}

/// `step(prefixes)` returns next-token log-probabilities for each prefix of
/// generated tokens (all prefixes share one length).
pub type StepFn<'a, E> = dyn FnMut(&[Vec<u32>]) -> Result<Vec<Vec<f32>>, E> + 'a;

fn argmax(v: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

pub fn greedy<E>(step: &mut StepFn<'_, E>, rules: &TokenRules, max_tokens: usize) -> Result<DecodeOutput, E> {
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut finished = false;
    for t in 0..max_tokens {
        let mut logp = step(std::slice::from_ref(&tokens))?.remove(0);
        rules.apply(&mut logp, t);
        let next = argmax(&logp);
        score += logp[next as usize] as f64;
        if next == rules.eos {
            finished = true;
            break;
        }
        tokens.push(next);
    }
    let best = Hypothesis { tokens, score, finished };
    Ok(DecodeOutput {
        beam_scores: vec![best.score],
        best,
    })
}

struct Candidate {
    score: f64,
    logp: f32,
    beam: usize,
    token: u32,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.logp.total_cmp(&a.logp))
        .then(a.beam.cmp(&b.beam))
        .then(a.token.cmp(&b.token))
}

/// Beam search without length normalization; stops once the best finished
/// hypothesis outscores every live one. A beam of one reproduces greedy.
pub fn beam_search<E>(step: &mut StepFn<'_, E>, rules: &TokenRules, beam_size: usize, max_tokens: usize) -> Result<DecodeOutput, E> {
    let beam_size = beam_size.max(1);
    let mut alive = vec![Hypothesis {
        tokens: vec![],
        score: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for t in 0..max_tokens {
        let prefixes: Vec<Vec<u32>> = alive.iter().map(|h| h.tokens.clone()).collect();
        let all = step(&prefixes)?;
        let mut cands = Vec::new();
        for (bi, mut logp) in all.into_iter().enumerate() {
            rules.apply(&mut logp, t);
            for (tok, &lp) in logp.iter().enumerate() {
                if lp.is_finite() {
                    cands.push(Candidate {
                        score: alive[bi].score + lp as f64,
                        logp: lp,
                        beam: bi,
                        token: tok as u32,
                    });
                }
            }
        }
        cands.sort_by(rank);
        let mut next = Vec::new();
        for c in cands.into_iter() {
            if next.len() == beam_size {
                break;
            }
            if c.token == rules.eos {
                if done.len() < beam_size {
                    done.push(Hypothesis {
                        tokens: alive[c.beam].tokens.clone(),
                        score: c.score,
                        finished: true,
                    });
                }
                if next.is_empty() && done.len() >= beam_size {
                    break;
                }
                continue;
            }
            let mut tokens = alive[c.beam].tokens.clone();
            tokens.push(c.token);
            next.push(Hypothesis {
                tokens,
                score: c.score,
                finished: false,
            });
        }
        alive = next;
        let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if alive.is_empty() || best_done >= best_alive {
            break;
        }
    }
    let mut pool: Vec<Hypothesis> = done.into_iter().chain(alive).collect();
    pool.sort_by(|a, b| b.score.total_cmp(&a.score).then(b.finished.cmp(&a.finished)));
    pool.truncate(beam_size);
    let best = pool.first().cloned().unwrap_or(Hypothesis {
        tokens: vec![],
        score: 0.0,
        finished: false,
    });
    Ok(DecodeOutput {
        beam_scores: pool.iter().map(|h| h.score).collect(),
        best,
    })
}

pub fn decode<E>(step: &mut StepFn<'_, E>, rules: &TokenRules, cfg: &DecodeConfig) -> Result<DecodeOutput, E> {
    if cfg.greedy {
        greedy(step, rules, cfg.max_tokens)
    } else {
        beam_search(step, rules, cfg.beam_size, cfg.max_tokens)
    }
}
