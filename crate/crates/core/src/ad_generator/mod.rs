//! What to say: AD text from a frozen causal LM conditioned on resampled
//! visual features through zero-initialized tanh-gated cross-attention.
//!
//! The prompt-style variant instead maps visual features to ten prefix
//! embeddings followed by a learned BOS embedding, leaving the LM untouched.

pub mod blocks;
pub mod decode;
pub mod lm;
pub mod prompt;

use std::path::Path;

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{AdamW, Init, Linear, Optimizer, ParamsAdamW};
use log::debug;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use blocks::{GatedXAttn, Resampler, ResamplerConfig};
pub use decode::{DecodeConfig, DecodeOutput, TokenRules};
pub use lm::{pretrain_lm, CausalLm, LmConfig, LmTrainConfig};
pub use prompt::{render_prompt, BudgetPolicy, PromptBudget, RenderedPrompt, Template};

use crate::character_bank::CharacterEntry;
use crate::nn::layers::{key_padding_mask, linear};
use crate::nn::train::masked_cross_entropy;
use crate::nn::{Checkpoint, CheckpointError, LrSchedule, ParamStore};
use crate::vocab::{self, Vocab};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("context AD has {tokens} tokens, budget is {budget}")]
    TooManyContextTokens { tokens: usize, budget: usize },
    #[error("character text exceeds the {budget}-token budget")]
    CharTextOverflow { tokens: usize, budget: usize },
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("frozen language model weights changed during training")]
    FrozenWeightsChanged,
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    GatedXAttn,
    PromptStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub lm: LmConfig,
    pub resampler: ResamplerConfig,
    pub xattn_heads: usize,
    pub xattn_ff_dim: usize,
    /// Exemplar slots; unused slots are zero and masked.
    pub max_exemplars: usize,
    pub budget: PromptBudget,
    pub variant: Variant,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            resampler: ResamplerConfig::default(),
            xattn_heads: 12,
            xattn_ff_dim: 3072,
            max_exemplars: 10,
            budget: PromptBudget::default(),
            variant: Variant::GatedXAttn,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    /// Frame features of the clip interval.
    pub clip_features: Array2<f32>,
    /// Active characters, in prompt order.
    pub characters: Vec<CharacterEntry>,
    pub template: Option<Template>,
    pub context_ad: Vec<String>,
    pub decode: DecodeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateValue {
    pub attn: f64,
    pub ff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub text: String,
    pub tokens: Vec<u32>,
    pub beam_scores: Vec<f64>,
    /// `|tanh(g)|` per cross-attention block.
    pub gate_trace: Vec<GateValue>,
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSample {
    pub clip_features: Array2<f32>,
    pub characters: Vec<CharacterEntry>,
    /// Preceding AD sentences, oldest first.
    pub context_ad: Vec<String>,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub template: Option<Template>,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 1e-4,
            warmup_steps: 0,
            weight_decay: 0.0,
            template: Some(Template::NamesActorsImages),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneratorReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub batch_losses: Vec<f64>,
    /// Mean `|tanh(g)|` over all gates after each step.
    pub gate_history: Vec<f64>,
    pub lm_checksum: String,
}

/// Media rows for the resampler with per-row validity.
struct Media {
    rows: Array2<f32>,
    valid: Vec<bool>,
}

struct Prepared {
    /// Prompt ids; starts with BOS for the gated variant.
    prompt: Vec<u32>,
    media: Media,
}

#[derive(Serialize, Deserialize)]
struct SavedGenerator {
    config: GeneratorConfig,
    vocab: Vocab,
}

/// Special tokens that are never generated.
pub fn token_rules(vocab: &Vocab) -> TokenRules {
    let mut banned: Vec<u32> = [vocab::PAD, vocab::UNK, vocab::BOS, vocab::VIDEO, vocab::IMAGE, vocab::MASK]
        .iter()
        .filter_map(|t| vocab.get(t))
        .collect();
    banned.extend((0..vocab::NUM_TIMESTAMP_TOKENS).filter_map(|i| vocab.get(&vocab::timestamp_token(i))));
    TokenRules {
        eos: vocab.eos(),
        banned,
    }
}

/// Log-probabilities (f32) of the last position for each row of `logits` (B, T, V).
fn last_log_probs(logits: &Tensor) -> candle_core::Result<Vec<Vec<f32>>> {
    let t = logits.dim(1)?;
    let last = logits.narrow(1, t - 1, 1)?.squeeze(1)?;
    candle_nn::ops::log_softmax(&last, D::Minus1)?
        .to_dtype(DType::F32)?
        .to_vec2::<f32>()
}

fn ids_tensor(prompt: &[u32], prefixes: &[Vec<u32>], dev: &candle_core::Device) -> candle_core::Result<Tensor> {
    let t = prompt.len() + prefixes.first().map(Vec::len).unwrap_or(0);
    let mut ids = Vec::with_capacity(prefixes.len() * t);
    for p in prefixes {
        ids.extend_from_slice(prompt);
        ids.extend_from_slice(p);
    }
    Tensor::from_vec(ids, (prefixes.len(), t), dev)
}

/// Decodes a continuation of `prompt` with the LM alone.
pub fn lm_generate(lm: &CausalLm, vocab: &Vocab, prompt: &[u32], cfg: &DecodeConfig) -> Result<GenerationResult, GeneratorError> {
    let dev = lm.params().device().clone();
    let mut step = |prefixes: &[Vec<u32>]| -> Result<Vec<Vec<f32>>, GeneratorError> {
        let logits = lm.forward_ids(&ids_tensor(prompt, prefixes, &dev)?)?;
        Ok(last_log_probs(&logits)?)
    };
    let out = decode::decode(&mut step, &token_rules(vocab), cfg)?;
    Ok(GenerationResult {
        text: vocab.decode(&out.best.tokens),
        tokens: out.best.tokens,
        beam_scores: out.beam_scores,
        gate_trace: vec![],
    })
}

/// Frozen LM plus trainable resampler, gated cross-attention stack and,
/// for the prompt-style variant, a prefix mapper and BOS embedding.
pub struct AdGenerator {
    config: GeneratorConfig,
    vocab: Vocab,
    lm: CausalLm,
    store: ParamStore,
    resampler: Resampler,
    xattn: Vec<GatedXAttn>,
    mapper: Option<Linear>,
    bos: Option<Tensor>,
}

impl AdGenerator {
    /// Builds trainable parts around `lm`, whose parameters must be frozen.
    pub fn new(mut config: GeneratorConfig, vocab: Vocab, lm: CausalLm, seed: u64) -> Result<Self, GeneratorError> {
        if lm.params().is_trainable() {
            return Err(GeneratorError::Config("the language model must be frozen".into()));
        }
        if lm.config().vocab_size != vocab.len() {
            return Err(GeneratorError::Config(format!(
                "LM vocabulary {} differs from tokenizer vocabulary {}",
                lm.config().vocab_size,
                vocab.len()
            )));
        }
        config.lm = lm.config().clone();
        let dim = lm.dim();
        if config.xattn_heads == 0 || dim % config.xattn_heads != 0 {
            return Err(GeneratorError::Config(format!("LM width {dim} not divisible by {} heads", config.xattn_heads)));
        }
        let store = ParamStore::new(seed, lm.params().dtype(), true);
        let vb = store.var_builder();
        let resampler = Resampler::new(&config.resampler, vb.pp("resampler"))?;
        let channels = config.resampler.channels;
        let (xattn, mapper, bos) = match config.variant {
            Variant::GatedXAttn => {
                let xattn = (0..config.lm.layers)
                    .map(|i| GatedXAttn::new(dim, channels, config.xattn_heads, config.xattn_ff_dim, vb.pp(format!("xattn.{i}"))))
                    .collect::<candle_core::Result<Vec<_>>>()?;
                (xattn, None, None)
            }
            Variant::PromptStyle => {
                let mapper = linear(channels, dim, vb.pp("mapper"))?;
                let bos = vb.get_with_hints(dim, "bos", Init::Randn { mean: 0.0, stdev: 0.02 })?;
                (vec![], Some(mapper), Some(bos))
            }
        };
        Ok(Self {
            config,
            vocab,
            lm,
            store,
            resampler,
            xattn,
            mapper,
            bos,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn lm(&self) -> &CausalLm {
        &self.lm
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Gate variables in block order, `(g_attn, g_ff)`.
    pub fn gate_vars(&self) -> Vec<(candle_core::Var, candle_core::Var)> {
        (0..self.xattn.len())
            .filter_map(|i| {
                let a = self.store.get_var(&format!("xattn.{i}.g_attn"))?;
                let f = self.store.get_var(&format!("xattn.{i}.g_ff"))?;
                Some((a, f))
            })
            .collect()
    }

    pub fn gate_trace(&self) -> Result<Vec<GateValue>, GeneratorError> {
        self.gate_vars()
            .iter()
            .map(|(a, f)| {
                let v = |t: &candle_core::Var| -> candle_core::Result<f64> {
                    Ok(t.as_tensor().tanh()?.abs()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
                };
                Ok(GateValue { attn: v(a)?, ff: v(f)? })
            })
            .collect()
    }

    fn media(&self, clip: ArrayView2<f32>, chars: &[CharacterEntry], rendered: &RenderedPrompt) -> Result<Media, GeneratorError> {
        let d = self.config.resampler.proj_in;
        if clip.nrows() == 0 {
            return Err(GeneratorError::EmptyInput("clip has no frames"));
        }
        if clip.ncols() != d {
            return Err(GeneratorError::DimMismatch { expected: d, got: clip.ncols() });
        }
        let slots = if rendered.image_tags > 0 { self.config.max_exemplars } else { 0 };
        let mut rows = Array2::zeros((clip.nrows() + slots, d));
        rows.slice_mut(ndarray::s![..clip.nrows(), ..]).assign(&clip);
        let mut valid = vec![true; clip.nrows()];
        valid.extend(std::iter::repeat_n(false, slots));
        for (slot, &ci) in rendered.characters.iter().enumerate().take(slots) {
            let f = chars[ci].feature();
            if f.len() != d {
                return Err(GeneratorError::DimMismatch { expected: d, got: f.len() });
            }
            for (j, v) in f.iter().enumerate() {
                rows[[clip.nrows() + slot, j]] = *v;
            }
            valid[clip.nrows() + slot] = true;
        }
        Ok(Media { rows, valid })
    }

    fn prepare(
        &self,
        clip: ArrayView2<f32>,
        chars: &[CharacterEntry],
        template: Option<Template>,
        context: &[String],
    ) -> Result<(Prepared, RenderedPrompt), GeneratorError> {
        let rendered = render_prompt(template, chars, context, self.config.max_exemplars, &self.config.budget)?;
        let media = self.media(clip, chars, &rendered)?;
        let mut prompt = Vec::new();
        if self.config.variant == Variant::GatedXAttn {
            prompt.push(self.vocab.bos());
        }
        prompt.extend(self.vocab.encode(&rendered.text));
        Ok((Prepared { prompt, media }, rendered))
    }

    fn resample_batch(&self, media: &[&Media]) -> candle_core::Result<Tensor> {
        let views: Vec<_> = media.iter().map(|m| m.rows.view()).collect();
        let dtype = self.store.dtype();
        let (x, _) = crate::nn::pad_batch(&views, self.config.resampler.proj_in, dtype, self.store.device())?;
        let m = x.dim(1)?;
        let valid: Vec<Vec<bool>> = media
            .iter()
            .map(|md| (0..m).map(|i| md.valid.get(i).copied().unwrap_or(false)).collect())
            .collect();
        let mask = key_padding_mask(&valid, dtype, self.store.device())?;
        self.resampler.forward(&x, Some(&mask))
    }

    /// Fixed-length summary (num_latents x channels) of `visual` (M x proj_in).
    pub fn resample(&self, visual: ArrayView2<f32>) -> Result<Array2<f32>, GeneratorError> {
        if visual.nrows() == 0 {
            return Err(GeneratorError::EmptyInput("no visual rows"));
        }
        if visual.ncols() != self.config.resampler.proj_in {
            return Err(GeneratorError::DimMismatch {
                expected: self.config.resampler.proj_in,
                got: visual.ncols(),
            });
        }
        let media = Media {
            rows: visual.to_owned(),
            valid: vec![true; visual.nrows()],
        };
        let z = self.resample_batch(&[&media])?.squeeze(0)?.to_dtype(DType::F32)?;
        let (l, c) = z.dims2()?;
        Ok(Array2::from_shape_vec((l, c), z.flatten_all()?.to_vec1::<f32>()?).expect("shape matches"))
    }

    /// LM logits (B, T, V) with every block followed by its gated
    /// cross-attention over `latents` (B, L, channels).
    pub fn gated_forward(&self, embeds: &Tensor, latents: &Tensor) -> Result<Tensor, GeneratorError> {
        let c = latents.dim(D::Minus1)?;
        if c != self.config.resampler.channels {
            return Err(GeneratorError::DimMismatch {
                expected: self.config.resampler.channels,
                got: c,
            });
        }
        let xattn = &self.xattn;
        Ok(self.lm.forward_embeds(embeds, &mut |i, h| match xattn.get(i) {
            Some(block) => block.forward(&h, latents),
            None => Ok(h),
        })?)
    }

    fn prefix(&self, latents: &Tensor) -> candle_core::Result<Tensor> {
        let mapper = self.mapper.as_ref().expect("prompt-style variant");
        let bos = self.bos.as_ref().expect("prompt-style variant");
        let b = latents.dim(0)?;
        let p = mapper.forward(latents)?;
        let bos = bos.reshape((1, 1, self.lm.dim()))?.broadcast_as((b, 1, self.lm.dim()))?;
        Tensor::cat(&[&p, &bos], 1)
    }

    /// Input length the LM sees in the prompt-style variant: visual prefix
    /// plus the BOS embedding and prompt words.
    pub fn prompt_style_input_len(&self, req: &GenerationRequest) -> Result<usize, GeneratorError> {
        let rendered = render_prompt(req.template, &req.characters, &req.context_ad, self.config.max_exemplars, &self.config.budget)?;
        Ok(self.config.resampler.num_latents + 1 + self.vocab.encode(&rendered.text).len())
    }

    /// Token ids of the rendered prompt, as the LM sees them.
    pub fn prompt_ids(&self, req: &GenerationRequest) -> Result<Vec<u32>, GeneratorError> {
        Ok(self.prepare(req.clip_features.view(), &req.characters, req.template, &req.context_ad)?.0.prompt)
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GeneratorError> {
        let (prep, _) = self.prepare(req.clip_features.view(), &req.characters, req.template, &req.context_ad)?;
        let latents = self.resample_batch(&[&prep.media])?;
        let dev = self.store.device().clone();
        let prompt = prep.prompt;
        let out = match self.config.variant {
            Variant::GatedXAttn => {
                let mut step = |prefixes: &[Vec<u32>]| -> Result<Vec<Vec<f32>>, GeneratorError> {
                    let n = prefixes.len();
                    let ids = ids_tensor(&prompt, prefixes, &dev)?;
                    let lat = latents.broadcast_as((n, latents.dim(1)?, latents.dim(2)?))?.contiguous()?;
                    let logits = self.gated_forward(&self.lm.embed(&ids)?, &lat)?;
                    Ok(last_log_probs(&logits)?)
                };
                decode::decode(&mut step, &token_rules(&self.vocab), &req.decode)?
            }
            Variant::PromptStyle => {
                let prefix = self.prefix(&latents)?;
                let mut step = |prefixes: &[Vec<u32>]| -> Result<Vec<Vec<f32>>, GeneratorError> {
                    let n = prefixes.len();
                    let (_, p, d) = prefix.dims3()?;
                    let pre = prefix.broadcast_as((n, p, d))?.contiguous()?;
                    let ids = ids_tensor(&prompt, prefixes, &dev)?;
                    let x = if ids.dim(1)? == 0 {
                        pre
                    } else {
                        Tensor::cat(&[&pre, &self.lm.embed(&ids)?], 1)?
                    };
                    let logits = self.lm.forward_embeds(&x, &mut |_, h| Ok(h))?;
                    Ok(last_log_probs(&logits)?)
                };
                decode::decode(&mut step, &token_rules(&self.vocab), &req.decode)?
            }
        };
        Ok(GenerationResult {
            text: self.vocab.decode(&out.best.tokens),
            tokens: out.best.tokens,
            beam_scores: out.beam_scores,
            gate_trace: self.gate_trace()?,
        })
    }

    /// Prompt-style generation; the generator must be built with that variant.
    pub fn generate_prompt_style(&self, req: &GenerationRequest) -> Result<GenerationResult, GeneratorError> {
        if self.config.variant != Variant::PromptStyle {
            return Err(GeneratorError::Config("generator was not built with the prompt-style variant".into()));
        }
        self.generate(req)
    }

    /// What the frozen LM alone generates from the same text prompt.
    pub fn generate_text_only(&self, req: &GenerationRequest) -> Result<GenerationResult, GeneratorError> {
        let prompt = self.prompt_ids(req)?;
        lm_generate(&self.lm, &self.vocab, &prompt, &req.decode)
    }
}

impl AdGenerator {
    /// Mean next-token cross-entropy over target tokens and EOS.
    pub fn batch_loss(&self, samples: &[&GeneratorSample], template: Option<Template>, recurrent: bool) -> Result<Tensor, GeneratorError> {
        let dev = self.store.device().clone();
        let dtype = self.store.dtype();
        let mut seqs = Vec::with_capacity(samples.len());
        let mut media = Vec::with_capacity(samples.len());
        for s in samples {
            let ctx: &[String] = if recurrent { &s.context_ad } else { &[] };
            let (prep, _) = self.prepare(s.clip_features.view(), &s.characters, template, ctx)?;
            let mut full = prep.prompt.clone();
            full.extend(self.vocab.encode(&s.target));
            full.push(self.vocab.eos());
            seqs.push((full, prep.prompt.len()));
            media.push(prep.media);
        }
        let refs: Vec<&Media> = media.iter().collect();
        let latents = self.resample_batch(&refs)?;
        let b = seqs.len();
        let t = seqs.iter().map(|(f, _)| f.len() - 1).max().unwrap_or(1);
        let mut inputs = vec![self.vocab.pad(); b * t];
        let mut targets = vec![self.vocab.pad(); b * t];
        let mut weights = vec![0f32; b * t];
        for (r, (full, plen)) in seqs.iter().enumerate() {
            for p in 0..full.len() - 1 {
                inputs[r * t + p] = full[p];
                targets[r * t + p] = full[p + 1];
                if p + 1 >= *plen {
                    weights[r * t + p] = 1.0;
                }
            }
        }
        let ids = Tensor::from_vec(inputs, (b, t), &dev)?;
        let (logits, offset) = match self.config.variant {
            Variant::GatedXAttn => (self.gated_forward(&self.lm.embed(&ids)?, &latents)?, 0),
            Variant::PromptStyle => {
                // The prefix ends with BOS, which predicts the first prompt word.
                let prefix = self.prefix(&latents)?;
                let p = prefix.dim(1)?;
                let x = Tensor::cat(&[&prefix, &self.lm.embed(&ids)?], 1)?;
                let logits = self.lm.forward_embeds(&x, &mut |_, h| Ok(h))?;
                let first_logits = logits.narrow(1, p - 1, 1)?;
                let rest = logits.narrow(1, p, t)?;
                (Tensor::cat(&[&first_logits, &rest], 1)?, 1)
            }
        };
        let v = logits.dim(2)?;
        let (all_t, w, y) = if offset == 0 {
            (t, weights, targets)
        } else {
            // Position 0 predicts the first prompt word, which carries no loss.
            let t1 = t + 1;
            let mut w2 = vec![0f32; b * t1];
            let mut y2 = vec![self.vocab.pad(); b * t1];
            for r in 0..b {
                y2[r * t1] = seqs[r].0[0];
                for p in 0..t {
                    w2[r * t1 + p + 1] = weights[r * t + p];
                    y2[r * t1 + p + 1] = targets[r * t + p];
                }
            }
            (t1, w2, y2)
        };
        let loss = masked_cross_entropy(
            &logits.reshape((b * all_t, v))?,
            &Tensor::from_vec(y, b * all_t, &dev)?,
            &Tensor::from_vec(w, b * all_t, &dev)?.to_dtype(dtype)?,
        )?;
        Ok(loss)
    }

    fn corpus_loss(&self, samples: &[GeneratorSample], template: Option<Template>, recurrent: bool, batch_size: usize) -> Result<f64, GeneratorError> {
        let (mut num, mut den) = (0.0, 0.0);
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&GeneratorSample> = chunk.iter().collect();
            let l = self.batch_loss(&refs, template, recurrent)?.detach();
            num += l.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            den += chunk.len() as f64;
        }
        Ok(num / den.max(1.0))
    }

    fn mean_gate(&self) -> Result<f64, GeneratorError> {
        let g = self.gate_trace()?;
        if g.is_empty() {
            return Ok(0.0);
        }
        Ok(g.iter().map(|v| v.attn + v.ff).sum::<f64>() / (2 * g.len()) as f64)
    }

    /// Trains resampler, gates and mapper; the LM stays frozen.
    pub fn train(
        &mut self,
        corpus: &[GeneratorSample],
        cfg: &GeneratorTrainConfig,
        seed: u64,
        recurrent: bool,
    ) -> Result<GeneratorReport, GeneratorError> {
        if corpus.is_empty() {
            return Err(GeneratorError::DegenerateCorpus("no samples".into()));
        }
        if corpus.iter().all(|s| self.vocab.encode(&s.target).is_empty()) {
            return Err(GeneratorError::DegenerateCorpus("every target is empty".into()));
        }
        let lm_checksum = self.lm.params().checksum()?;
        let batch_size = cfg.batch_size.max(1);
        let mut report = GeneratorReport {
            initial_loss: self.corpus_loss(corpus, cfg.template, recurrent, batch_size)?,
            ..Default::default()
        };
        let schedule = LrSchedule {
            base_lr: cfg.lr,
            warmup_steps: cfg.warmup_steps,
            total_steps: corpus.len().div_ceil(batch_size) * cfg.epochs,
        };
        let vars = self.store.vars().into_iter().map(|(_, v)| v).collect();
        let mut opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch_size) {
                let refs: Vec<&GeneratorSample> = chunk.iter().map(|&i| &corpus[i]).collect();
                let loss = self.batch_loss(&refs, cfg.template, recurrent)?;
                opt.set_learning_rate(schedule.lr_at(report.steps));
                opt.backward_step(&loss)?;
                report.steps += 1;
                report.batch_losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
                report.gate_history.push(self.mean_gate()?);
            }
            debug!(
                "generator epoch {epoch}: loss {:.4}, mean |tanh g| {:.4}",
                report.batch_losses.last().copied().unwrap_or(f64::NAN),
                report.gate_history.last().copied().unwrap_or(0.0)
            );
        }
        report.final_loss = self.corpus_loss(corpus, cfg.template, recurrent, batch_size)?;
        report.lm_checksum = self.lm.params().checksum()?;
        if report.lm_checksum != lm_checksum {
            return Err(GeneratorError::FrozenWeightsChanged);
        }
        Ok(report)
    }

    /// Caption-style pretraining of resampler and gates without character
    /// prompts or context.
    pub fn pretrain_visual(&mut self, captions: &[GeneratorSample], cfg: &GeneratorTrainConfig, seed: u64) -> Result<GeneratorReport, GeneratorError> {
        let cfg = GeneratorTrainConfig { template: None, ..cfg.clone() };
        self.train(captions, &cfg, seed, false)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, GeneratorError> {
        let saved = SavedGenerator {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        let mut tensors = std::collections::BTreeMap::new();
        for (k, v) in self.lm.params().snapshot()? {
            tensors.insert(format!("lm.{k}"), v);
        }
        for (k, v) in self.store.snapshot()? {
            tensors.insert(format!("gen.{k}"), v);
        }
        Ok(Checkpoint::new(serde_json::to_string(&saved)?, tensors))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, GeneratorError> {
        let mut saved: SavedGenerator = serde_json::from_str(&ck.config)?;
        saved.vocab.reindex();
        let lm_tensors = ck.section("lm.");
        let dtype = lm_tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let lm = CausalLm::frozen(saved.config.lm.clone(), 0, dtype)?;
        lm.params().load(&lm_tensors)?;
        let g = Self::new(saved.config, saved.vocab, lm, 0)?;
        g.store.load(&ck.section("gen."))?;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeneratorError> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, GeneratorError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
