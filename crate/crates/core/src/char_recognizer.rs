//! On-screen character recognition.
//!
//! Exemplar features act as queries and clip frames as keys/values of a
//! shallow transformer decoder; each query yields the probability that its
//! character appears in the clip. Queries never attend to one another and
//! frames carry no positional encoding, so outputs are equivariant to
//! exemplar order and invariant to frame order.

use std::path::Path;

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{AdamW, Linear, Optimizer, ParamsAdamW};
use log::debug;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::character_bank::cosine;
use crate::nn::layers::{key_padding_mask, linear, linear_small, FeedForward, LayerNorm, MultiHeadAttention};
use crate::nn::train::{balanced_weights, sigmoid, weighted_bce_with_logits};
use crate::nn::{pad_batch, Checkpoint, CheckpointError, LrSchedule, ParamStore};

#[derive(Debug, Error)]
pub enum RecognizerError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("alpha {0} outside [-1, 1]")]
    InvalidAlpha(f64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerConfig {
    pub proj_in: usize,
    pub proj_out: usize,
    pub num_blocks: usize,
    pub channels: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub threshold: f64,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            proj_in: 512,
            proj_out: 512,
            num_blocks: 2,
            channels: 512,
            heads: 8,
            ff_dim: 2048,
            threshold: 0.5,
        }
    }
}

impl RecognizerConfig {
    pub fn validate(&self) -> Result<(), RecognizerError> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(RecognizerError::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(RecognizerError::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionResult {
    pub probabilities: Vec<f64>,
    /// Indices `j` with `probabilities[j] >= threshold`.
    pub active: Vec<usize>,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderBlock {
    fn new(cfg: &RecognizerConfig, vb: candle_nn::VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::new(cfg.channels, vb.pp("ln_q"))?,
            ln_kv: LayerNorm::new(cfg.channels, vb.pp("ln_kv"))?,
            attn: MultiHeadAttention::new(cfg.channels, cfg.channels, cfg.heads, vb.pp("attn"))?,
            ln_ff: LayerNorm::new(cfg.channels, vb.pp("ln_ff"))?,
            ff: FeedForward::new(cfg.channels, cfg.ff_dim, vb.pp("ff"))?,
        })
    }

    fn forward(&self, q: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let kv = self.ln_kv.forward(kv)?;
        let q = (q + self.attn.forward(&self.ln_q.forward(q)?, &kv, mask)?)?;
        &q + self.ff.forward(&self.ln_ff.forward(&q)?)?
    }
}

/// Transformer-decoder character recognizer.
pub struct CharRecognizer {
    config: RecognizerConfig,
    store: ParamStore,
    proj: Linear,
    to_channels: Option<Linear>,
    blocks: Vec<DecoderBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl CharRecognizer {
    pub fn new(config: RecognizerConfig, seed: u64) -> Result<Self, RecognizerError> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: RecognizerConfig, seed: u64, dtype: DType) -> Result<Self, RecognizerError> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype, true);
        let vb = store.var_builder();
        // One projection shared by exemplars and frames.
        let proj = linear(config.proj_in, config.proj_out, vb.pp("proj"))?;
        let to_channels = if config.proj_out != config.channels {
            Some(linear(config.proj_out, config.channels, vb.pp("to_channels"))?)
        } else {
            None
        };
        let blocks = (0..config.num_blocks)
            .map(|i| DecoderBlock::new(&config, vb.pp(format!("blocks.{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let norm = LayerNorm::new(config.channels, vb.pp("norm"))?;
        let head = linear_small(config.channels, 1, 0.02, vb.pp("head"))?;
        Ok(Self {
            config,
            store,
            proj,
            to_channels,
            blocks,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &RecognizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn embed(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = self.proj.forward(x)?;
        match &self.to_channels {
            Some(l) => l.forward(&x),
            None => Ok(x),
        }
    }

    /// Logits of shape (B, C) for exemplars (B, C, D) against frames (B, N, D).
    pub fn forward(&self, exemplars: &Tensor, frames: &Tensor, frame_mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let kv = self.embed(frames)?;
        let mut q = self.embed(exemplars)?;
        for b in &self.blocks {
            q = b.forward(&q, &kv, frame_mask)?;
        }
        self.head.forward(&self.norm.forward(&q)?)?.squeeze(D::Minus1)
    }

    fn check_dims(&self, exemplars: ArrayView2<f32>, clip: ArrayView2<f32>) -> Result<(), RecognizerError> {
        for d in [exemplars.ncols(), clip.ncols()] {
            if d != self.config.proj_in {
                return Err(RecognizerError::DimMismatch {
                    expected: self.config.proj_in,
                    got: d,
                });
            }
        }
        if exemplars.nrows() == 0 {
            return Err(RecognizerError::EmptyInput("no exemplars"));
        }
        if clip.nrows() == 0 {
            return Err(RecognizerError::EmptyInput("no clip frames"));
        }
        Ok(())
    }

    pub fn probabilities(&self, exemplars: ArrayView2<f32>, clip: ArrayView2<f32>) -> Result<Vec<f64>, RecognizerError> {
        self.check_dims(exemplars, clip)?;
        let dev = self.store.device();
        let dtype = self.store.dtype();
        let (e, _) = pad_batch(&[exemplars], self.config.proj_in, dtype, dev)?;
        let (f, _) = pad_batch(&[clip], self.config.proj_in, dtype, dev)?;
        let logits = self
            .forward(&e, &f, None)?
            .squeeze(0)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        Ok(logits.into_iter().map(sigmoid).collect())
    }

    pub fn recognize(&self, exemplars: ArrayView2<f32>, clip: ArrayView2<f32>) -> Result<RecognitionResult, RecognizerError> {
        let probabilities = self.probabilities(exemplars, clip)?;
        let active = probabilities
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= self.config.threshold)
            .map(|(j, _)| j)
            .collect();
        Ok(RecognitionResult { probabilities, active })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, RecognizerError> {
        Ok(Checkpoint::new(serde_json::to_string(&self.config)?, self.store.snapshot()?))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, RecognizerError> {
        let config: RecognizerConfig = serde_json::from_str(&ck.config)?;
        let model = Self::new(config, 0)?;
        model.store.load(&ck.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), RecognizerError> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, RecognizerError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Max cosine over clip frames for each exemplar.
pub fn cosine_scores(exemplars: ArrayView2<f32>, clip: ArrayView2<f32>) -> Result<Vec<f64>, RecognizerError> {
    if exemplars.ncols() != clip.ncols() {
        return Err(RecognizerError::DimMismatch {
            expected: exemplars.ncols(),
            got: clip.ncols(),
        });
    }
    Ok(exemplars
        .rows()
        .into_iter()
        .map(|e| {
            clip.rows()
                .into_iter()
                .map(|f| cosine(e, f))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Characters whose best frame cosine reaches `alpha`.
pub fn cosine_baseline(exemplars: ArrayView2<f32>, clip: ArrayView2<f32>, alpha: f64) -> Result<Vec<usize>, RecognizerError> {
    if !(-1.0..=1.0).contains(&alpha) {
        return Err(RecognizerError::InvalidAlpha(alpha));
    }
    Ok(cosine_scores(exemplars, clip)?
        .into_iter()
        .enumerate()
        .filter(|(_, s)| *s >= alpha)
        .map(|(j, _)| j)
        .collect())
}

/// One clip with its candidate characters and on-screen labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionSample {
    pub exemplars: Array2<f32>,
    pub clip: Array2<f32>,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
}

impl Default for RecognizerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 512,
            lr: 1e-4,
            warmup_steps: 0,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Balanced BCE over the whole training set before the first step.
    pub initial_loss: f64,
    /// Balanced BCE over the whole training set after the last step.
    pub final_loss: f64,
    pub batch_losses: Vec<f64>,
}

struct Batch {
    exemplars: Tensor,
    frames: Tensor,
    mask: Tensor,
    targets: Tensor,
    weights: Tensor,
}

fn make_batch(
    samples: &[&RecognitionSample],
    class_weights: (f32, f32),
    dim: usize,
    dtype: DType,
    dev: &candle_core::Device,
) -> candle_core::Result<Batch> {
    let ex: Vec<_> = samples.iter().map(|s| s.exemplars.view()).collect();
    let fr: Vec<_> = samples.iter().map(|s| s.clip.view()).collect();
    let (exemplars, ex_valid) = pad_batch(&ex, dim, dtype, dev)?;
    let (frames, fr_valid) = pad_batch(&fr, dim, dtype, dev)?;
    let mask = key_padding_mask(&fr_valid, dtype, dev)?;
    let c = ex_valid[0].len();
    let mut targets = Vec::with_capacity(samples.len() * c);
    let mut weights = Vec::with_capacity(samples.len() * c);
    for (s, valid) in samples.iter().zip(&ex_valid) {
        for (j, &ok) in valid.iter().enumerate() {
            let y = ok && s.labels[j];
            targets.push(if y { 1f32 } else { 0.0 });
            weights.push(match (ok, y) {
                (false, _) => 0.0,
                (true, true) => class_weights.0,
                (true, false) => class_weights.1,
            });
        }
    }
    let shape = (samples.len(), c);
    Ok(Batch {
        exemplars,
        frames,
        mask,
        targets: Tensor::from_vec(targets, shape, dev)?.to_dtype(dtype)?,
        weights: Tensor::from_vec(weights, shape, dev)?.to_dtype(dtype)?,
    })
}

fn validate_dataset(data: &[RecognitionSample], dim: usize) -> Result<(f32, f32), RecognizerError> {
    let mut labels = Vec::new();
    for s in data {
        if s.exemplars.ncols() != dim || s.clip.ncols() != dim {
            return Err(RecognizerError::DimMismatch {
                expected: dim,
                got: if s.exemplars.ncols() != dim { s.exemplars.ncols() } else { s.clip.ncols() },
            });
        }
        if s.labels.len() != s.exemplars.nrows() {
            return Err(RecognizerError::DegenerateDataset(format!(
                "{} labels for {} exemplars",
                s.labels.len(),
                s.exemplars.nrows()
            )));
        }
        if s.exemplars.nrows() == 0 || s.clip.nrows() == 0 {
            return Err(RecognizerError::DegenerateDataset("sample without exemplars or frames".into()));
        }
        labels.extend(s.labels.iter().map(|&y| if y { 1f32 } else { 0.0 }));
    }
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    if pos == 0 || pos == labels.len() {
        return Err(RecognizerError::DegenerateDataset(
            "labels must contain both positives and negatives".into(),
        ));
    }
    let w = balanced_weights(&labels);
    let wp = labels.iter().zip(&w).find(|(y, _)| **y > 0.5).map(|(_, w)| *w).unwrap_or(0.0);
    let wn = labels.iter().zip(&w).find(|(y, _)| **y < 0.5).map(|(_, w)| *w).unwrap_or(0.0);
    Ok((wp, wn))
}

impl CharRecognizer {
    fn dataset_loss(&self, data: &[RecognitionSample], class_weights: (f32, f32), batch_size: usize) -> candle_core::Result<f64> {
        let dev = self.store.device().clone();
        let dtype = self.store.dtype();
        let mut num = 0.0;
        let mut den = 0.0;
        let refs: Vec<&RecognitionSample> = data.iter().collect();
        for chunk in refs.chunks(batch_size.max(1)) {
            let b = make_batch(chunk, class_weights, self.config.proj_in, dtype, &dev)?;
            let logits = self.forward(&b.exemplars, &b.frames, Some(&b.mask))?.detach();
            let wsum = b.weights.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let loss = weighted_bce_with_logits(&logits, &b.targets, &b.weights)?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            num += loss * wsum;
            den += wsum;
        }
        Ok(if den > 0.0 { num / den } else { 0.0 })
    }

    /// Label-balanced BCE over a dataset, without updating weights.
    pub fn evaluate_loss(&self, data: &[RecognitionSample]) -> Result<f64, RecognizerError> {
        let cw = validate_dataset(data, self.config.proj_in)?;
        Ok(self.dataset_loss(data, cw, 64)?)
    }

    /// AdamW training with inverse-frequency label balancing.
    pub fn train(
        &mut self,
        data: &[RecognitionSample],
        cfg: &RecognizerTrainConfig,
        seed: u64,
    ) -> Result<TrainReport, RecognizerError> {
        let class_weights = validate_dataset(data, self.config.proj_in)?;
        let batch_size = cfg.batch_size.max(1);
        let steps_per_epoch = data.len().div_ceil(batch_size);
        let schedule = LrSchedule {
            base_lr: cfg.lr,
            warmup_steps: cfg.warmup_steps,
            total_steps: steps_per_epoch * cfg.epochs,
        };
        let mut report = TrainReport {
            initial_loss: self.dataset_loss(data, class_weights, batch_size)?,
            ..TrainReport::default()
        };
        let vars: Vec<_> = self.store.vars().into_iter().map(|(_, v)| v).collect();
        let mut opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dev = self.store.device().clone();
        let dtype = self.store.dtype();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch_size) {
                let samples: Vec<&RecognitionSample> = chunk.iter().map(|&i| &data[i]).collect();
                let b = make_batch(&samples, class_weights, self.config.proj_in, dtype, &dev)?;
                let logits = self.forward(&b.exemplars, &b.frames, Some(&b.mask))?;
                let loss = weighted_bce_with_logits(&logits, &b.targets, &b.weights)?;
                opt.set_learning_rate(schedule.lr_at(report.steps));
                opt.backward_step(&loss)?;
                report.steps += 1;
                report
                    .batch_losses
                    .push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
            }
            debug!(
                "recognizer epoch {epoch}: last batch loss {:.4}",
                report.batch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        report.final_loss = self.dataset_loss(data, class_weights, batch_size)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn small() -> RecognizerConfig {
        RecognizerConfig {
            proj_in: 8,
            proj_out: 16,
            num_blocks: 2,
            channels: 16,
            heads: 4,
            ff_dim: 32,
            threshold: 0.5,
        }
    }

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f32> {
        Array2::from_shape_fn((r, c), |_| {
            let x: f64 = StandardNormal.sample(rng);
            x as f32
        })
    }

    #[test]
    fn shape_and_range() {
        let m = CharRecognizer::new(small(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = m.recognize(randn(&mut rng, 3, 8).view(), randn(&mut rng, 10, 8).view()).unwrap();
        assert_eq!(r.probabilities.len(), 3);
        assert!(r.probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn exemplar_permutation_is_equivariant() {
        let m = CharRecognizer::new(small(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = randn(&mut rng, 3, 8);
        let f = randn(&mut rng, 7, 8);
        let p = m.probabilities(e.view(), f.view()).unwrap();
        let perm = [2usize, 0, 1];
        let e2 = Array2::from_shape_fn((3, 8), |(i, j)| e[[perm[i], j]]);
        let p2 = m.probabilities(e2.view(), f.view()).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            assert!((p2[i] - p[pi]).abs() < 1e-6);
        }
    }

    #[test]
    fn dim_mismatch() {
        let m = CharRecognizer::new(small(), 0).unwrap();
        let e = Array2::<f32>::zeros((2, 5));
        let f = Array2::<f32>::zeros((2, 8));
        assert!(matches!(m.recognize(e.view(), f.view()), Err(RecognizerError::DimMismatch { .. })));
    }

    #[test]
    fn cosine_baseline_identity_and_alpha_domain() {
        let e = array![[1.0f32, 0.0], [0.0, 1.0]];
        let f = array![[0.0f32, 1.0], [0.5, 0.5]];
        assert_eq!(cosine_baseline(e.view(), f.view(), 0.99).unwrap(), vec![1]);
        assert!(matches!(
            cosine_baseline(e.view(), f.view(), 1.0 + 1e-9),
            Err(RecognizerError::InvalidAlpha(_))
        ));
    }

    #[test]
    fn degenerate_and_zero_epoch_training() {
        let mut m = CharRecognizer::new(small(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = RecognitionSample {
            exemplars: randn(&mut rng, 2, 8),
            clip: randn(&mut rng, 4, 8),
            labels: vec![true, true],
        };
        assert!(matches!(
            m.train(&[s.clone()], &RecognizerTrainConfig::default(), 0),
            Err(RecognizerError::DegenerateDataset(_))
        ));
        let before = m.params().checksum().unwrap();
        let mixed = RecognitionSample { labels: vec![true, false], ..s };
        let cfg = RecognizerTrainConfig { epochs: 0, ..Default::default() };
        let report = m.train(&[mixed], &cfg, 0).unwrap();
        assert_eq!(report.steps, 0);
        assert_eq!(m.params().checksum().unwrap(), before);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = CharRecognizer::new(small(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.ckpt");
        m.save(&path).unwrap();
        let back = CharRecognizer::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params().checksum().unwrap(), m.params().checksum().unwrap());
    }
}
