//! Acceptance suite: one pass/fail line per criterion, then an assertion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

mod common;

use std::fs;

use autoad_core::ad_generator::blocks::ResamplerConfig;
use autoad_core::ad_generator::decode::DecodeConfig;
use autoad_core::ad_generator::lm::{pretrain_lm, CausalLm, LmConfig, LmTrainConfig};
use autoad_core::ad_generator::prompt::{render_prompt, PromptBudget, Template};
use autoad_core::ad_generator::{AdGenerator, GenerationRequest, GeneratorConfig, GeneratorSample, GeneratorTrainConfig};
use autoad_core::char_recognizer::{cosine_scores, CharRecognizer, RecognitionSample, RecognizerConfig, RecognizerTrainConfig};
use autoad_core::character_bank::{calibrate_exemplar, CharacterEntry};
use autoad_core::config::RunConfig;
use autoad_core::evaluation::cider::cider;
use autoad_core::evaluation::classification::{average_precision, roc_auc};
use autoad_core::evaluation::recall::recall_from_fn;
use autoad_core::evaluation::rouge_l;
use autoad_core::feature_store::FrameFeatureTrack;
use autoad_core::pipeline::{run_pipeline, GENERATED_FILE, PROPOSALS_FILE};
use autoad_core::synth::*;
use autoad_core::temporal_proposer::{
    build_vocab, duration_sweep, tokenize_window, GapPrediction, ProposerConfig, ProposerModel, ProposerTrainConfig,
};
use autoad_core::vocab::{Vocab, MASK};
use candle_core::{DType, Tensor};
use common::*;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn report(id: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("[{verdict}] criterion {id} ({name}): {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f32> {
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

fn entry(name: &str, actor: &str, feature: Vec<f32>) -> CharacterEntry {
    CharacterEntry {
        char_name: name.into(),
        actor_name: actor.into(),
        portrait_feature: feature,
        exemplar_feature: None,
        top_k_frame_indices: vec![],
    }
}

fn small_generator(vocab: &Vocab, dim: usize, dtype: DType, seed: u64) -> AdGenerator {
    let lm_cfg = LmConfig {
        vocab_size: vocab.len(),
        dim: 32,
        layers: 2,
        heads: 4,
        ff_dim: 64,
        max_len: 128,
    };
    let lm = CausalLm::frozen(lm_cfg, seed, dtype).unwrap();
    let cfg = GeneratorConfig {
        resampler: ResamplerConfig {
            num_latents: 4,
            num_blocks: 1,
            channels: 16,
            heads: 2,
            ff_dim: 32,
            proj_in: dim,
        },
        xattn_heads: 4,
        xattn_ff_dim: 32,
        ..Default::default()
    };
    AdGenerator::new(cfg, vocab.clone(), lm, seed + 1).unwrap()
}

fn word_vocab() -> Vocab {
    let mut corpus: Vec<String> = ONE_HOT_SENTENCES.iter().map(|s| s.to_string()).collect();
    corpus.extend(CHARACTER_NAMES.iter().map(|s| s.to_string()));
    corpus.extend(ACTOR_NAMES.iter().map(|s| s.to_string()));
    corpus.extend(ACTIONS.iter().map(|s| s.to_string()));
    let budget = PromptBudget::default();
    let chars = vec![entry("anna", "mia stone", vec![1.0])];
    for t in 0..=3 {
        corpus.push(render_prompt(Template::from_index(t), &chars, &["x.".into()], 1, &budget).unwrap().text);
    }
    Vocab::build(corpus.iter().map(String::as_str))
}

#[test]
fn criterion_1_gating_identity() {
    let dim = 8;
    let vocab = word_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut cases, mut mismatches) = (0, 0);
    for model_seed in 0..4u64 {
        let g = small_generator(&vocab, dim, DType::F32, model_seed * 10);
        for _ in 0..30 {
            let n_chars = rng.random_range(0..4);
            let mut names: Vec<usize> = (0..CHARACTER_NAMES.len()).collect();
            names.shuffle(&mut rng);
            let characters = names[..n_chars]
                .iter()
                .map(|&i| entry(CHARACTER_NAMES[i], ACTOR_NAMES[i], randn(&mut rng, (1, dim)).into_raw_vec_and_offset().0))
                .collect();
            let context_ad = (0..rng.random_range(0..3))
                .map(|_| ONE_HOT_SENTENCES[rng.random_range(0..ONE_HOT_SENTENCES.len())].to_string())
                .collect();
            let greedy = rng.random_bool(0.3);
            let frames = rng.random_range(1..20);
            let req = GenerationRequest {
                clip_features: randn(&mut rng, (frames, dim)),
                characters,
                template: Template::from_index(rng.random_range(0..4)),
                context_ad,
                decode: DecodeConfig {
                    beam_size: rng.random_range(1..5),
                    max_tokens: rng.random_range(1..10),
                    greedy,
                },
            };
            let a = g.generate(&req).unwrap();
            let b = g.generate_text_only(&req).unwrap();
            cases += 1;
            if a.tokens != b.tokens {
                mismatches += 1;
            }
        }
    }
    report(1, "gating identity", cases >= 100 && mismatches == 0, &format!("{mismatches} mismatches over {cases} random requests"));
}

#[test]
fn criterion_2_calibration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut index_mismatches) = (0.0f64, 0);
    let n = 1000;
    for _ in 0..n {
        let t = rng.random_range(1..40);
        let d = rng.random_range(1..12);
        let k = rng.random_range(1..=t);
        let mut frames = randn(&mut rng, (t, d));
        // Repeated rows force exact ties.
        if t > 2 && rng.random_bool(0.3) {
            let src = frames.row(0).to_owned();
            frames.row_mut(t - 1).assign(&src);
        }
        let mut portrait: Vec<f32> = randn(&mut rng, (1, d)).into_raw_vec_and_offset().0;
        if portrait.iter().all(|&x| x == 0.0) {
            portrait[0] = 1.0;
        }
        let times = (0..t).map(|i| i as f64 * 0.5).collect();
        let track = FrameFeatureTrack::new("m", frames.clone(), times, None).unwrap();
        let got = calibrate_exemplar(&portrait, &track, k).unwrap();
        let rows: Vec<Vec<f32>> = frames.rows().into_iter().map(|r| r.to_vec()).collect();
        let (want, idx) = oracle_calibration(&portrait, &rows, k);
        if got.indices != idx {
            index_mismatches += 1;
        }
        for (a, b) in got.exemplar.iter().zip(&want) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    report(
        2,
        "calibration oracle",
        index_mismatches == 0 && worst <= 1e-6,
        &format!("{n} instances, {index_mismatches} index mismatches, max |delta| {worst:.2e}"),
    );
}

fn flatten(data: &[RecognitionSample], score: impl Fn(&RecognitionSample) -> Vec<f64>) -> (Vec<f64>, Vec<bool>) {
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for x in data {
        s.extend(score(x));
        l.extend(x.labels.iter().copied());
    }
    (s, l)
}

#[test]
fn criterion_3_recognizer_learnability() {
    let spec = RecognizerCorpusSpec::default();
    let train = recognizer_corpus(&spec, 2000, 1);
    let test = recognizer_corpus(&spec, 500, 2);
    let (cs, cl) = flatten(&test, |x| cosine_scores(x.exemplars.view(), x.clip.view()).unwrap());
    // Thresholding the best-frame cosine at any alpha traces the PR curve of
    // this ranking, so its AP is the best-alpha AP.
    let cos_ap = average_precision(&cs, &cl).unwrap();
    let cfg = RecognizerConfig {
        proj_in: spec.dim,
        proj_out: 64,
        num_blocks: 2,
        channels: 64,
        heads: 4,
        ff_dim: 128,
        threshold: 0.5,
    };
    let mut m = CharRecognizer::new(cfg, 0).unwrap();
    let tc = RecognizerTrainConfig {
        epochs: 10,
        batch_size: 64,
        lr: 1e-3,
        warmup_steps: 20,
        weight_decay: 0.01,
    };
    let r = m.train(&train, &tc, 3).unwrap();
    let (ms, ml) = flatten(&test, |x| m.probabilities(x.exemplars.view(), x.clip.view()).unwrap());
    let auc = roc_auc(&ms, &ml).unwrap();
    let ap = average_precision(&ms, &ml).unwrap();
    report(
        3,
        "recognizer learnability",
        auc > 0.95 && ap >= cos_ap + 0.05,
        &format!(
            "AUC {auc:.4} (> 0.95), AP {ap:.4} vs cosine best-alpha AP {cos_ap:.4} (margin {:.4} >= 0.05), loss {:.3} -> {:.3}",
            ap - cos_ap,
            r.initial_loss,
            r.final_loss
        ),
    );
}

/// Ranking-by-duration AUC implied by the sampling distribution: bins are
/// internally exchangeable, so same-bin pairs count one half.
fn analytic_duration_auc(min_s: f64, max_s: f64) -> f64 {
    let bins: Vec<(f64, f64)> = DURATION_AD_RATES
        .iter()
        .filter_map(|&(a, b, r)| {
            let (lo, hi) = (a.max(min_s), b.min(max_s));
            (hi > lo).then(|| ((hi - lo) / (max_s - min_s), r))
        })
        .collect();
    let p: f64 = bins.iter().map(|(w, r)| w * r).sum();
    let n: f64 = bins.iter().map(|(w, r)| w * (1.0 - r)).sum();
    let mut auc = 0.0;
    for (i, (wi, ri)) in bins.iter().enumerate() {
        for (j, (wj, rj)) in bins.iter().enumerate() {
            let pair = wi * ri / p * wj * (1.0 - rj) / n;
            if i > j {
                auc += pair;
            } else if i == j {
                auc += 0.5 * pair;
            }
        }
    }
    auc
}

#[test]
fn criterion_4_duration_statistics() {
    let gaps = duration_gaps(20_000, 0.5, 10.0, 4);
    let sweep = duration_sweep(&gaps).unwrap();
    let optimum = analytic_duration_auc(0.5, 10.0);
    let sweep_ok = (sweep.auc - optimum).abs() <= 0.07;

    let spec = ProposerCorpusSpec::default();
    let train = proposer_windows(&spec, 600, 1);
    let test = proposer_windows(&spec, 300, 2);
    let cfg = ProposerConfig {
        visual_dim: spec.visual_dim,
        dim: 64,
        layers: 2,
        heads: 4,
        ff_dim: 128,
        ..Default::default()
    };
    let mut m = ProposerModel::new(cfg.clone(), build_vocab(&train), 0).unwrap();
    let tc = ProposerTrainConfig {
        epochs: 4,
        batch_size: 32,
        lr: 1e-3,
        warmup_steps: 20,
        weight_decay: 0.01,
    };
    m.train(&train, &tc, 3).unwrap();
    let (mut ms, mut ds, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (w, preds) in test.iter().zip(m.classify_windows(&test).unwrap()) {
        for (g, p) in w.gaps.iter().zip(preds) {
            if let (GapPrediction::Model(prob), Some(y)) = (p, g.label.as_bool()) {
                ms.push(prob);
                ds.push(g.duration());
                labels.push(y);
            }
        }
    }
    let model_ap = average_precision(&ms, &labels).unwrap();
    let dur_ap = average_precision(&ds, &labels).unwrap();
    report(
        4,
        "duration statistics",
        sweep_ok && model_ap > dur_ap,
        &format!(
            "sweep AUC {:.4} vs analytic {optimum:.4} (|delta| {:.4} <= 0.07); in-band AP model {model_ap:.4} > duration {dur_ap:.4} over {} gaps",
            sweep.auc,
            (sweep.auc - optimum).abs(),
            labels.len()
        ),
    );
}

#[test]
fn criterion_5_metric_goldens_and_recall_oracle() {
    let g = golden();
    let mut worst = 0.0f64;
    for f in &g.fixtures {
        let cands: Vec<&str> = f.items.iter().map(|i| i.candidate.as_str()).collect();
        let refs: Vec<Vec<&str>> = f.items.iter().map(|i| i.references.iter().map(String::as_str).collect()).collect();
        for (i, it) in f.items.iter().enumerate() {
            worst = worst.max((rouge_l(&it.candidate, &it.references).unwrap() - f.rouge_l[i]).abs());
        }
        let c = cider(&cands, &refs).unwrap();
        worst = worst.max((c.mean - f.cider_mean).abs());
        for (a, b) in c.per_item.iter().zip(&f.cider) {
            worst = worst.max((a - b).abs());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut oracle_mismatches = 0;
    for _ in 0..50 {
        let (mids, corr, sim) = random_instance(&mut rng);
        let n = rng.random_range(1..=mids.len());
        let k = rng.random_range(1..=n);
        if recall_from_fn(&mids, &corr, k, n, |g, j| sim[g][j]).unwrap() != oracle_recall(&mids, &corr, &sim, k, n) {
            oracle_mismatches += 1;
        }
    }

    let mut violations = 0;
    for _ in 0..1000 {
        let (mids, corr, sim) = random_instance(&mut rng);
        let f = |k, n| recall_from_fn(&mids, &corr, k, n, |g, j| sim[g][j]).unwrap();
        for n in 1..=mids.len() {
            if f(n, n) != 1.0 {
                violations += 1;
            }
            for k in 1..n {
                if f(k, n) > f(k + 1, n) {
                    violations += 1;
                }
            }
        }
    }
    report(
        5,
        "metric goldens",
        g.fixtures.len() == 20 && worst <= 1e-4 && oracle_mismatches == 0 && violations == 0,
        &format!(
            "{} golden fixtures max |delta| {worst:.2e}; R@k/N oracle mismatches {oracle_mismatches}/50; R@N/N and monotonicity violations {violations} over 1000 instances",
            g.fixtures.len()
        ),
    );
}

#[test]
fn criterion_6_token_window_invariants() {
    let windows = proposer_windows(&ProposerCorpusSpec::default(), 500, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut layout_bad, mut shift_bad) = (0, 0);
    for w in &windows {
        let toks = tokenize_window(w, 64);
        let masks = toks.tokens.iter().filter(|t| *t == MASK).count();
        let stamps = toks.tokens.iter().filter(|t| t.starts_with("<|t") && t.ends_with("|>")).count();
        if masks != w.gaps.len() || stamps != 2 * w.speech.len() {
            layout_bad += 1;
        }
        let delta = rng.random_range(-200i32..2000) as f64 * 0.5;
        if tokenize_window(&shift_window(w, delta), 64) != toks {
            shift_bad += 1;
        }
    }
    report(
        6,
        "token-window invariants",
        layout_bad == 0 && shift_bad == 0,
        &format!("{} windows: {layout_bad} layout violations, {shift_bad} shift violations", windows.len()),
    );
}

#[test]
fn criterion_7_gate_gradient_check() {
    let dim = 6;
    let vocab = word_vocab();
    let g = small_generator(&vocab, dim, DType::F64, 70);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gates: Vec<candle_core::Var> = g.gate_vars().into_iter().flat_map(|(a, f)| [a, f]).collect();
    let eps = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0);
    let set = |v: &candle_core::Var, x: f64| v.set(&Tensor::new(&[x], v.device()).unwrap()).unwrap();
    for s in 0..10 {
        for v in &gates {
            set(v, rng.random_range(-1.0..1.0));
        }
        let i = s % CHARACTER_NAMES.len();
        let frames = rng.random_range(1..6);
        let sample = GeneratorSample {
            clip_features: randn(&mut rng, (frames, dim)),
            characters: vec![entry(CHARACTER_NAMES[i], ACTOR_NAMES[i], randn(&mut rng, (1, dim)).into_raw_vec_and_offset().0)],
            context_ad: vec![],
            target: format!("{} {}", CHARACTER_NAMES[i], ACTIONS[s % ACTIONS.len()]),
        };
        let template = Some(Template::NamesActorsImages);
        let loss = g.batch_loss(&[&sample], template, false).unwrap();
        let grads = loss.backward().unwrap();
        let scalar = || g.batch_loss(&[&sample], template, false).unwrap().to_scalar::<f64>().unwrap();
        for v in &gates {
            let analytic = grads.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap()[0];
            let x0 = v.as_tensor().to_vec1::<f64>().unwrap()[0];
            set(v, x0 + eps);
            let up = scalar();
            set(v, x0 - eps);
            let down = scalar();
            set(v, x0);
            let numeric = (up - down) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    report(7, "gate gradient check", worst <= 1e-3, &format!("{checked} gate gradients over 10 samples, max relative error {worst:.2e}"));
}

#[test]
fn criterion_8_character_prompt_effect() {
    let dim = 16;
    let train = naming_corpus(dim, 600, 1);
    let test = naming_corpus(dim, 100, 2);
    let budget = PromptBudget::default();
    let mut texts = Vec::new();
    for s in &train {
        for t in [Some(Template::NamesActorsImages), None] {
            let p = render_prompt(t, &s.characters, &[], 10, &budget).unwrap();
            texts.push(format!("{} {}", p.text, s.target));
        }
    }
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    let lm_cfg = LmConfig {
        vocab_size: vocab.len(),
        dim: 64,
        layers: 2,
        heads: 4,
        ff_dim: 128,
        max_len: 96,
    };
    let lm_train = LmTrainConfig {
        epochs: 10,
        batch_size: 32,
        lr: 2e-3,
        warmup_steps: 20,
    };
    let (lm, _) = pretrain_lm(lm_cfg, &vocab, &texts, &lm_train, 5, DType::F32).unwrap();
    let gcfg = GeneratorConfig {
        resampler: ResamplerConfig {
            num_latents: 4,
            num_blocks: 1,
            channels: 64,
            heads: 4,
            ff_dim: 128,
            proj_in: dim,
        },
        xattn_heads: 4,
        xattn_ff_dim: 128,
        ..Default::default()
    };
    let mut fractions = Vec::new();
    for template in [Some(Template::NamesActorsImages), None] {
        let mut g = AdGenerator::new(gcfg.clone(), vocab.clone(), lm.freeze().unwrap(), 7).unwrap();
        let tc = GeneratorTrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 10,
            weight_decay: 0.0,
            template,
        };
        g.train(&train, &tc, 9, false).unwrap();
        let named = test
            .iter()
            .filter(|s| {
                let req = GenerationRequest {
                    clip_features: s.clip_features.clone(),
                    characters: s.characters.clone(),
                    template,
                    context_ad: vec![],
                    decode: DecodeConfig {
                        beam_size: 1,
                        max_tokens: 12,
                        greedy: true,
                    },
                };
                names_any(&g.generate(&req).unwrap().text, &s.characters)
            })
            .count();
        fractions.push((named, test.len()));
    }
    let [(a, n), (b, _)] = [fractions[0], fractions[1]];
    report(
        8,
        "character-prompt effect",
        a > b,
        &format!("names a supplied character: with character prompt {a}/{n} = {:.3}, without {b}/{n} = {:.3}", a as f64 / n as f64, b as f64 / n as f64),
    );
}

#[test]
fn criterion_9_end_to_end_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_fixture_corpus(&data, &FixtureSpec::default(), 0).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let cfg = RunConfig::desk(&data, dir.path().join(run));
        run_pipeline(&cfg).unwrap();
        let read = |f: &str| fs::read(cfg.paths.out_dir.join(f)).unwrap();
        outputs.push((read(PROPOSALS_FILE), read(GENERATED_FILE)));
    }
    let same_props = outputs[0].0 == outputs[1].0;
    let same_gen = outputs[0].1 == outputs[1].1;
    report(
        9,
        "end-to-end determinism",
        same_props && same_gen,
        &format!(
            "proposals identical: {same_props} ({} bytes), generations identical: {same_gen} ({} bytes)",
            outputs[0].0.len(),
            outputs[0].1.len()
        ),
    );
}
