//! Small causal transformer language model used as the frozen text decoder.

use candle_core::{DType, Module, Result, Tensor};
use candle_nn::{AdamW, Init, Optimizer, ParamsAdamW, VarBuilder};
use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{causal_mask, FeedForward, LayerNorm, MultiHeadAttention};
use crate::nn::train::masked_cross_entropy;
use crate::nn::{LrSchedule, ParamStore};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            dim: 768,
            layers: 12,
            heads: 12,
            ff_dim: 3072,
            max_len: 256,
        }
    }
}

#[derive(Debug, Clone)]
struct LmBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl LmBlock {
    fn new(cfg: &LmConfig, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(cfg.dim, vb.pp("ln1"))?,
            attn: MultiHeadAttention::new(cfg.dim, cfg.dim, cfg.heads, vb.pp("attn"))?,
            ln2: LayerNorm::new(cfg.dim, vb.pp("ln2"))?,
            ff: FeedForward::new(cfg.dim, cfg.ff_dim, vb.pp("ff"))?,
        })
    }

    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, Some(mask))?)?;
        &x + self.ff.forward(&self.ln2.forward(&x)?)?
    }
}

/// Pre-norm causal transformer with learned positions and a tied output head.
#[derive(Clone)]
pub struct CausalLm {
    config: LmConfig,
    store: ParamStore,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<LmBlock>,
    norm: LayerNorm,
}

impl CausalLm {
    pub fn new(config: LmConfig, store: ParamStore) -> Result<Self> {
        if config.vocab_size == 0 {
            candle_core::bail!("language model needs a nonempty vocabulary");
        }
        let vb = store.var_builder();
        let tok_emb = vb.get_with_hints((config.vocab_size, config.dim), "tok_emb", Init::Randn { mean: 0.0, stdev: 0.02 })?;
        let pos_emb = vb.get_with_hints((config.max_len, config.dim), "pos_emb", Init::Randn { mean: 0.0, stdev: 0.02 })?;
        let blocks = (0..config.layers)
            .map(|i| LmBlock::new(&config, vb.pp(format!("blocks.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(config.dim, vb.pp("norm"))?;
        Ok(Self {
            config,
            store,
            tok_emb,
            pos_emb,
            blocks,
            norm,
        })
    }

    /// Randomly initialized weights that never receive gradients.
    pub fn frozen(config: LmConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::new(config, ParamStore::new(seed, dtype, false))
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Token embeddings (B, T, dim) for ids (B, T).
    pub fn embed(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        self.tok_emb
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, t, self.config.dim))
    }

    /// Next-token logits (B, T, V) for input embeddings (B, T, dim).
    ///
    /// `after_block(i, h)` may rewrite the hidden state after block `i`.
    pub fn forward_embeds(&self, x: &Tensor, after_block: &mut dyn FnMut(usize, Tensor) -> Result<Tensor>) -> Result<Tensor> {
        let (_, t, _) = x.dims3()?;
        if t > self.config.max_len {
            candle_core::bail!("sequence of {t} tokens exceeds the {} position limit", self.config.max_len);
        }
        let mut h = x.broadcast_add(&self.pos_emb.narrow(0, 0, t)?)?;
        let mask = causal_mask(t, h.dtype(), h.device())?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, &mask)?;
            h = after_block(i, h)?;
        }
        self.norm.forward(&h)?.broadcast_matmul(&self.tok_emb.t()?)
    }

    pub fn forward_ids(&self, ids: &Tensor) -> Result<Tensor> {
        self.forward_embeds(&self.embed(ids)?, &mut |_, h| Ok(h))
    }

    /// Copies these weights into a frozen store.
    pub fn freeze(&self) -> Result<Self> {
        let frozen = Self::new(self.config.clone(), ParamStore::new(0, self.store.dtype(), false))?;
        frozen.store.load(&self.store.snapshot()?)?;
        Ok(frozen)
    }
}

/// `[BOS] words [EOS]` ids for each text.
pub fn lm_sequences(vocab: &Vocab, texts: &[String]) -> Vec<Vec<u32>> {
    texts
        .iter()
        .map(|t| {
            let mut ids = vec![vocab.bos()];
            ids.extend(vocab.encode(t));
            ids.push(vocab.eos());
            ids
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 1e-4,
            warmup_steps: 0,
        }
    }
}

/// Text-only adaptation: trains a fresh LM on `texts` and returns it frozen.
pub fn pretrain_lm(config: LmConfig, vocab: &Vocab, texts: &[String], cfg: &LmTrainConfig, seed: u64, dtype: DType) -> Result<(CausalLm, Vec<f64>)> {
    if texts.is_empty() {
        candle_core::bail!("empty text corpus");
    }
    let lm = CausalLm::new(config, ParamStore::new(seed, dtype, true))?;
    let seqs = lm_sequences(vocab, texts);
    let batch_size = cfg.batch_size.max(1);
    let schedule = LrSchedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_steps,
        total_steps: seqs.len().div_ceil(batch_size) * cfg.epochs,
    };
    let vars = lm.store.vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6d);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut losses = Vec::new();
    let mut step = 0;
    let dev = lm.store.device().clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let t = chunk.iter().map(|&i| seqs[i].len() - 1).max().unwrap_or(1);
            let b = chunk.len();
            let mut inputs = vec![vocab.pad(); b * t];
            let mut targets = vec![vocab.pad(); b * t];
            let mut weights = vec![0f32; b * t];
            for (r, &i) in chunk.iter().enumerate() {
                let s = &seqs[i];
                for p in 0..s.len() - 1 {
                    inputs[r * t + p] = s[p];
                    targets[r * t + p] = s[p + 1];
                    weights[r * t + p] = 1.0;
                }
            }
            let logits = lm.forward_ids(&Tensor::from_vec(inputs, (b, t), &dev)?)?;
            let v = logits.dim(2)?;
            let loss = masked_cross_entropy(
                &logits.reshape((b * t, v))?,
                &Tensor::from_vec(targets, b * t, &dev)?,
                &Tensor::from_vec(weights, b * t, &dev)?.to_dtype(dtype)?,
            )?;
            opt.set_learning_rate(schedule.lr_at(step));
            opt.backward_step(&loss)?;
            step += 1;
            losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        }
        debug!("lm epoch {epoch}: loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
    }
    Ok((lm.freeze()?, losses))
}
