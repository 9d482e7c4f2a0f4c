//! Generator training on synthetic corpora with a known answer.

use autoad_core::ad_generator::blocks::ResamplerConfig;
use autoad_core::ad_generator::decode::DecodeConfig;
use autoad_core::ad_generator::lm::{pretrain_lm, LmConfig, LmTrainConfig};
use autoad_core::ad_generator::prompt::{render_prompt, PromptBudget};
use autoad_core::ad_generator::{AdGenerator, GenerationRequest, GeneratorConfig, GeneratorSample, GeneratorTrainConfig, Variant};
use autoad_core::synth::one_hot_corpus;
use autoad_core::vocab::Vocab;
use candle_core::DType;

const DIM: usize = 8;

fn setup(train: &[GeneratorSample], variant: Variant) -> AdGenerator {
    let budget = PromptBudget::default();
    let texts: Vec<String> = train
        .iter()
        .map(|s| {
            let p = render_prompt(None, &s.characters, &[], 10, &budget).unwrap();
            format!("{} {}", p.text, s.target)
        })
        .collect();
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    let lm_cfg = LmConfig {
        vocab_size: vocab.len(),
        dim: 32,
        layers: 2,
        heads: 4,
        ff_dim: 64,
        max_len: 48,
    };
    let lm_train = LmTrainConfig {
        epochs: 30,
        batch_size: 16,
        lr: 2e-3,
        warmup_steps: 5,
    };
    let (lm, lm_losses) = pretrain_lm(lm_cfg, &vocab, &texts, &lm_train, 1, DType::F32).unwrap();
    println!("lm loss {:.3} -> {:.3}", lm_losses[0], lm_losses.last().unwrap());
    let cfg = GeneratorConfig {
        resampler: ResamplerConfig {
            num_latents: 4,
            num_blocks: 1,
            channels: 32,
            heads: 4,
            ff_dim: 64,
            proj_in: DIM,
        },
        xattn_heads: 4,
        xattn_ff_dim: 64,
        variant,
        ..Default::default()
    };
    AdGenerator::new(cfg, vocab, lm.freeze().unwrap(), 2).unwrap()
}

fn exact_match(g: &AdGenerator, test: &[GeneratorSample]) -> f64 {
    let hits = test
        .iter()
        .filter(|s| {
            let req = GenerationRequest {
                clip_features: s.clip_features.clone(),
                characters: vec![],
                template: None,
                context_ad: vec![],
                decode: DecodeConfig {
                    beam_size: 1,
                    max_tokens: 12,
                    greedy: true,
                },
            };
            g.generate(&req).unwrap().text == s.target
        })
        .count();
    hits as f64 / test.len() as f64
}

fn train_cfg() -> GeneratorTrainConfig {
    GeneratorTrainConfig {
        epochs: 40,
        batch_size: 16,
        lr: 5e-3,
        warmup_steps: 5,
        weight_decay: 0.0,
        template: None,
    }
}

#[test]
fn one_hot_patterns_are_described_exactly() {
    let train = one_hot_corpus(DIM, 4, 240, 0.1, 1);
    let test = one_hot_corpus(DIM, 4, 60, 0.1, 2);
    let mut g = setup(&train, Variant::GatedXAttn);
    let lm_before = g.lm().params().checksum().unwrap();
    let report = g.train(&train, &train_cfg(), 3, false).unwrap();
    let acc = exact_match(&g, &test);
    println!("gated exact match {acc:.3}, loss {:.3} -> {:.3}", report.initial_loss, report.final_loss);
    assert!(acc >= 0.95, "exact match {acc}");
    assert_eq!(g.lm().params().checksum().unwrap(), lm_before);
    assert_eq!(report.lm_checksum, lm_before);
    assert!(report.gate_history.iter().all(|&v| v > 0.0));
}

#[test]
fn prompt_style_variant_learns_the_same_mapping() {
    let train = one_hot_corpus(DIM, 4, 240, 0.1, 1);
    let test = one_hot_corpus(DIM, 4, 60, 0.1, 2);
    let mut g = setup(&train, Variant::PromptStyle);
    let lm_before = g.lm().params().checksum().unwrap();
    g.train(&train, &train_cfg(), 3, false).unwrap();
    let acc = exact_match(&g, &test);
    println!("prompt-style exact match {acc:.3}");
    assert!(acc >= 0.85, "exact match {acc}");
    assert_eq!(g.lm().params().checksum().unwrap(), lm_before);
}

#[test]
fn checkpoint_restores_generations() {
    let train = one_hot_corpus(DIM, 4, 60, 0.1, 1);
    let mut g = setup(&train, Variant::GatedXAttn);
    let cfg = GeneratorTrainConfig { epochs: 2, ..train_cfg() };
    g.train(&train, &cfg, 3, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    g.save(&path).unwrap();
    let back = AdGenerator::load(&path).unwrap();
    let req = GenerationRequest {
        clip_features: train[0].clip_features.clone(),
        characters: vec![],
        template: None,
        context_ad: vec![],
        decode: DecodeConfig::default(),
    };
    assert_eq!(g.generate(&req).unwrap(), back.generate(&req).unwrap());
}
