//! When to describe: speech-gap extraction, window tokenization and the
//! per-gap AD classifier, plus the duration-threshold baseline.

use std::path::Path;

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{AdamW, Embedding, Init, Linear, Optimizer, ParamsAdamW, VarBuilder};
use log::debug;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{FrameFeatureTrack, MovieRecord, TextKind, TimedText};
use crate::nn::layers::{key_padding_mask, linear, linear_small, sincos_encoding, FeedForward, LayerNorm, MultiHeadAttention};
use crate::nn::train::{sigmoid, weighted_bce_with_logits};
use crate::nn::{Checkpoint, CheckpointError, LrSchedule, ParamStore};
use crate::vocab::{split_words, timestamp_token, Vocab, MASK, NUM_TIMESTAMP_TOKENS};

pub const WINDOW_S: f64 = 30.0;
pub const TIME_RESOLUTION_S: f64 = 0.5;
pub const DEFAULT_STRIDE_S: f64 = 15.0;
pub const SWEEP_POINTS: usize = 100;

#[derive(Debug, Error)]
pub enum ProposerError {
    #[error("speech segment {index} overlaps or precedes the previous one")]
    OverlappingSpeech { index: usize },
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("model has not been trained or loaded")]
    UntrainedModel,
    #[error("no labeled gaps")]
    NoLabeledGaps,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("visual dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapLabel {
    ContainsAd,
    NoAd,
    Unlabeled,
}

impl GapLabel {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            GapLabel::ContainsAd => Some(true),
            GapLabel::NoAd => Some(false),
            GapLabel::Unlabeled => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapSample {
    pub start_s: f64,
    pub end_s: f64,
    pub label: GapLabel,
}

impl GapSample {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Maximal speech-free intervals inside `[t0, t1]`, boundary gaps included.
///
/// Speech is clipped to the window; segments must be sorted and disjoint
/// (touching is allowed).
pub fn extract_gaps(speech: &[TimedText], t0: f64, t1: f64) -> Result<Vec<(f64, f64)>, ProposerError> {
    if !(t0 < t1) {
        return Err(ProposerError::InvalidWindow(format!("[{t0}, {t1}]")));
    }
    let mut gaps = Vec::new();
    let mut cursor = t0;
    let mut prev_end = f64::NEG_INFINITY;
    for (index, s) in speech.iter().enumerate() {
        if s.start_s < prev_end || s.end_s < s.start_s {
            return Err(ProposerError::OverlappingSpeech { index });
        }
        prev_end = s.end_s;
        let (a, b) = (s.start_s.max(t0), s.end_s.min(t1));
        if a >= b {
            continue;
        }
        if a > cursor {
            gaps.push((cursor, a));
        }
        cursor = cursor.max(b);
    }
    if cursor < t1 {
        gaps.push((cursor, t1));
    }
    Ok(gaps)
}

/// Unions overlapping speech segments, joining their text.
pub fn merge_speech(speech: &[TimedText]) -> Vec<TimedText> {
    let mut sorted: Vec<TimedText> = speech.to_vec();
    sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    let mut out: Vec<TimedText> = Vec::with_capacity(sorted.len());
    for s in sorted {
        match out.last_mut() {
            Some(last) if s.start_s < last.end_s => {
                last.end_s = last.end_s.max(s.end_s);
                if !s.text.is_empty() {
                    if !last.text.is_empty() {
                        last.text.push(' ');
                    }
                    last.text.push_str(&s.text);
                }
            }
            _ => out.push(s),
        }
    }
    out
}

/// Speech segments for a movie: ASR speech when present, subtitles otherwise.
pub fn speech_timeline(record: &MovieRecord) -> Vec<TimedText> {
    let src = if record.speech.is_empty() { &record.subtitles } else { &record.speech };
    merge_speech(src)
}

/// A gap is labeled as containing AD when an AD event's midpoint falls in it.
pub fn label_gap(start_s: f64, end_s: f64, ad: &[TimedText]) -> GapLabel {
    if ad.iter().any(|e| {
        let m = e.midpoint();
        m >= start_s && m < end_s
    }) {
        GapLabel::ContainsAd
    } else {
        GapLabel::NoAd
    }
}

/// Thirty-second context: clipped speech, the gaps between it, and one
/// pooled visual row per second.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub speech: Vec<TimedText>,
    pub gaps: Vec<GapSample>,
    pub visual: Array2<f32>,
    /// Absolute time of each visual row.
    pub visual_times: Vec<f64>,
}

impl ContextWindow {
    pub fn new(
        window_start_s: f64,
        window_end_s: f64,
        speech: Vec<TimedText>,
        gaps: Vec<GapSample>,
        visual: Array2<f32>,
        visual_times: Vec<f64>,
    ) -> Result<Self, ProposerError> {
        let w = Self {
            window_start_s,
            window_end_s,
            speech,
            gaps,
            visual,
            visual_times,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ProposerError> {
        let bad = |m: String| Err(ProposerError::InvalidWindow(m));
        let (t0, t1) = (self.window_start_s, self.window_end_s);
        if !(t0 < t1) || t1 - t0 > WINDOW_S + 1e-9 {
            return bad(format!("span [{t0}, {t1}] must be positive and at most {WINDOW_S} s"));
        }
        if self.visual.nrows() != self.visual_times.len() {
            return bad("visual rows and times differ in length".into());
        }
        if self.visual.nrows() > WINDOW_S as usize {
            return bad(format!("{} visual rows exceed one per second", self.visual.nrows()));
        }
        let mut events: Vec<(f64, f64, bool)> = self
            .speech
            .iter()
            .map(|s| (s.start_s, s.end_s, true))
            .chain(self.gaps.iter().map(|g| (g.start_s, g.end_s, false)))
            .collect();
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut prev = t0;
        for (a, b, is_speech) in events {
            if a < t0 - 1e-9 || b > t1 + 1e-9 {
                return bad(format!("interval [{a}, {b}] outside window"));
            }
            if !(a < b) && !is_speech {
                return bad(format!("empty gap [{a}, {b}]"));
            }
            if a < prev - 1e-9 {
                return bad(format!("interval [{a}, {b}] overlaps its predecessor"));
            }
            prev = b;
        }
        Ok(())
    }

    /// Builds the window starting at `start_s` from a movie record, labeling
    /// gaps from the movie's AD events.
    pub fn from_record(record: &MovieRecord, speech: &[TimedText], start_s: f64) -> Result<Self, ProposerError> {
        let end_s = start_s + WINDOW_S;
        let clipped: Vec<TimedText> = speech
            .iter()
            .filter(|s| s.end_s > start_s && s.start_s < end_s)
            .map(|s| TimedText {
                start_s: s.start_s.max(start_s),
                end_s: s.end_s.min(end_s),
                kind: TextKind::Speech,
                text: s.text.clone(),
            })
            .collect();
        let gaps = extract_gaps(&clipped, start_s, end_s)?
            .into_iter()
            .map(|(a, b)| GapSample {
                start_s: a,
                end_s: b,
                label: label_gap(a, b, &record.ad),
            })
            .collect();
        let (visual, visual_times) = per_second_visual(&record.track, start_s, end_s);
        Self::new(start_s, end_s, clipped, gaps, visual, visual_times)
    }
}

/// Mean frame feature per whole second of `[t0, t1)`; seconds without frames
/// are skipped.
pub fn per_second_visual(track: &FrameFeatureTrack, t0: f64, t1: f64) -> (Array2<f32>, Vec<f64>) {
    let mut rows: Vec<Array1<f32>> = Vec::new();
    let mut times = Vec::new();
    let secs = ((t1 - t0).ceil() as usize).min(WINDOW_S as usize);
    for s in 0..secs {
        let a = t0 + s as f64;
        let b = (a + 1.0).min(t1);
        let Ok(range) = track.index_range(a, b) else { continue };
        if range.is_empty() {
            continue;
        }
        let n = range.len() as f32;
        let mut acc = Array1::<f32>::zeros(track.dim());
        for i in range {
            acc += &track.row(i);
        }
        rows.push(acc / n);
        times.push(0.5 * (a + b));
    }
    let mut out = Array2::zeros((rows.len(), track.dim()));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    (out, times)
}

/// Timestamp token index for a window-relative time: `round(t / 0.5)`,
/// halves rounded up, clamped to `[0, 60]`.
pub fn time_token_index(relative_s: f64) -> usize {
    // Snap float noise away first so shifted windows tokenize identically.
    let half_units = (relative_s / TIME_RESOLUTION_S * 1e6).round() / 1e6;
    (half_units + 0.5).floor().clamp(0.0, (NUM_TIMESTAMP_TOKENS - 1) as f64) as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    /// Index into `tokens` of the mask token for each gap, in gap order.
    pub mask_positions: Vec<usize>,
    /// Quantized (start, end) timestamp indices of each gap.
    pub gap_slots: Vec<(usize, usize)>,
}

/// Interleaves timestamped speech and one `<|mask|>` per gap, in time order.
pub fn tokenize_window(window: &ContextWindow, max_words_per_segment: usize) -> TokenSequence {
    enum Ev<'a> {
        Speech(&'a TimedText),
        Gap(usize),
    }
    let mut events: Vec<(f64, Ev)> = window
        .speech
        .iter()
        .map(|s| (s.start_s, Ev::Speech(s)))
        .chain(window.gaps.iter().enumerate().map(|(i, g)| (g.start_s, Ev::Gap(i))))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rel = |t: f64| time_token_index(t - window.window_start_s);
    let mut tokens = Vec::new();
    let mut mask_positions = vec![0; window.gaps.len()];
    let mut gap_slots = vec![(0, 0); window.gaps.len()];
    for (_, ev) in events {
        match ev {
            Ev::Speech(s) => {
                tokens.push(timestamp_token(rel(s.start_s)));
                tokens.extend(split_words(&s.text).into_iter().take(max_words_per_segment));
                tokens.push(timestamp_token(rel(s.end_s)));
            }
            Ev::Gap(i) => {
                mask_positions[i] = tokens.len();
                gap_slots[i] = (rel(window.gaps[i].start_s), rel(window.gaps[i].end_s));
                tokens.push(MASK.to_string());
            }
        }
    }
    TokenSequence {
        tokens,
        mask_positions,
        gap_slots,
    }
}

/// Outcome for one gap: a model probability inside the band, a fixed rule
/// outside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GapPrediction {
    Model(f64),
    HardRule(bool),
}

impl GapPrediction {
    pub fn probability(&self) -> f64 {
        match *self {
            GapPrediction::Model(p) => p,
            GapPrediction::HardRule(b) => f64::from(u8::from(b)),
        }
    }

    pub fn decision(&self, threshold: f64) -> bool {
        match *self {
            GapPrediction::Model(p) => p >= threshold,
            GapPrediction::HardRule(b) => b,
        }
    }

    pub fn is_model(&self) -> bool {
        matches!(self, GapPrediction::Model(_))
    }
}

/// Model probabilities of in-band gaps only, in gap order.
pub fn probabilities(preds: &[GapPrediction]) -> Vec<f64> {
    preds
        .iter()
        .filter_map(|p| match p {
            GapPrediction::Model(p) => Some(*p),
            GapPrediction::HardRule(_) => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerConfig {
    pub visual_dim: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Gaps with duration in `[band_min_s, band_max_s)` go to the model.
    pub band_min_s: f64,
    pub band_max_s: f64,
    pub max_words_per_segment: usize,
    pub use_visual: bool,
    pub use_duration: bool,
    /// Zero-padded audio features; not supported.
    pub audio_features: bool,
    pub threshold: f64,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        Self {
            visual_dim: 512,
            dim: 768,
            layers: 3,
            heads: 12,
            ff_dim: 3072,
            band_min_s: 2.0,
            band_max_s: 6.0,
            max_words_per_segment: 16,
            use_visual: true,
            use_duration: true,
            audio_features: false,
            threshold: 0.5,
        }
    }
}

impl ProposerConfig {
    pub fn validate(&self) -> Result<(), ProposerError> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ProposerError::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if !(self.band_min_s < self.band_max_s) {
            return Err(ProposerError::Config("empty duration band".into()));
        }
        if self.audio_features {
            return Err(ProposerError::Config("the audio feature path is disabled".into()));
        }
        Ok(())
    }

    pub fn in_band(&self, duration_s: f64) -> bool {
        duration_s >= self.band_min_s && duration_s < self.band_max_s
    }

    /// Rule for gaps outside the band.
    pub fn hard_rule(&self, duration_s: f64) -> Option<bool> {
        if duration_s < self.band_min_s {
            Some(false)
        } else if duration_s >= self.band_max_s {
            Some(true)
        } else {
            None
        }
    }
}

const GAP_FEATURES: usize = 3;

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderBlock {
    fn new(cfg: &ProposerConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(cfg.dim, vb.pp("ln1"))?,
            attn: MultiHeadAttention::new(cfg.dim, cfg.dim, cfg.heads, vb.pp("attn"))?,
            ln2: LayerNorm::new(cfg.dim, vb.pp("ln2"))?,
            ff: FeedForward::new(cfg.dim, cfg.ff_dim, vb.pp("ff"))?,
        })
    }

    fn forward(&self, x: &Tensor, mask: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, Some(mask))?)?;
        &x + self.ff.forward(&self.ln2.forward(&x)?)?
    }
}

#[derive(Serialize, Deserialize)]
struct SavedProposer {
    config: ProposerConfig,
    vocab: Vocab,
}

/// Masked-token transformer encoder over timestamped speech, gap masks and
/// per-second visual rows, with a binary head on each mask token.
pub struct ProposerModel {
    config: ProposerConfig,
    vocab: Vocab,
    store: ParamStore,
    tok_emb: Embedding,
    gap_proj: Linear,
    vis_proj: Linear,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    head: Linear,
    trained: bool,
}

struct EncodedBatch {
    input: Tensor,
    mask: Tensor,
    /// Flat indices into (B * L) of every model-scored gap.
    gather: Tensor,
    /// (window, gap) of every gathered row.
    owners: Vec<(usize, usize)>,
}

impl ProposerModel {
    pub fn new(config: ProposerConfig, vocab: Vocab, seed: u64) -> Result<Self, ProposerError> {
        config.validate()?;
        let store = ParamStore::new(seed, DType::F32, true);
        let vb = store.var_builder();
        let w = vb.get_with_hints((vocab.len(), config.dim), "tok_emb.weight", Init::Randn { mean: 0.0, stdev: 1.0 })?;
        let tok_emb = Embedding::new(w, config.dim);
        let gap_proj = candle_nn::linear_no_bias(GAP_FEATURES + config.visual_dim, config.dim, vb.pp("gap_proj"))?;
        let vis_proj = linear(config.visual_dim, config.dim, vb.pp("vis_proj"))?;
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::new(&config, vb.pp(format!("blocks.{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let norm = LayerNorm::new(config.dim, vb.pp("norm"))?;
        let head = linear_small(config.dim, 1, 0.02, vb.pp("head"))?;
        Ok(Self {
            config,
            vocab,
            store,
            tok_emb,
            gap_proj,
            vis_proj,
            blocks,
            norm,
            head,
            trained: false,
        })
    }

    pub fn config(&self) -> &ProposerConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Per-token side features: quantized gap timing and the mean visual row
    /// inside the gap, nonzero only on mask tokens.
    fn gap_features(&self, window: &ContextWindow, gap: usize, slot: (usize, usize)) -> Vec<f32> {
        let mut f = vec![0f32; GAP_FEATURES + self.config.visual_dim];
        if self.config.use_duration {
            let dur = (slot.1.saturating_sub(slot.0)) as f32 * TIME_RESOLUTION_S as f32;
            f[0] = dur / self.config.band_max_s as f32;
            f[1] = slot.0 as f32 / (NUM_TIMESTAMP_TOKENS - 1) as f32;
            f[2] = slot.1 as f32 / (NUM_TIMESTAMP_TOKENS - 1) as f32;
        }
        if self.config.use_visual {
            let g = &window.gaps[gap];
            let rows: Vec<usize> = (0..window.visual_times.len())
                .filter(|&i| window.visual_times[i] >= g.start_s && window.visual_times[i] <= g.end_s)
                .collect();
            if !rows.is_empty() {
                for &i in &rows {
                    for (j, v) in window.visual.row(i).iter().enumerate() {
                        f[GAP_FEATURES + j] += v / rows.len() as f32;
                    }
                }
            }
        }
        f
    }

    fn encode(&self, windows: &[&ContextWindow], only_labeled: bool) -> Result<Option<EncodedBatch>, ProposerError> {
        let dev = self.store.device().clone();
        let dim = self.config.dim;
        let vd = self.config.visual_dim;
        let seqs: Vec<TokenSequence> = windows
            .iter()
            .map(|w| tokenize_window(w, self.config.max_words_per_segment))
            .collect();
        let lt = seqs.iter().map(|s| s.tokens.len()).max().unwrap_or(0).max(1);
        let lv = if self.config.use_visual {
            windows.iter().map(|w| w.visual.nrows()).max().unwrap_or(0)
        } else {
            0
        };
        let l = lt + lv;
        let b = windows.len();
        let mut ids = vec![self.vocab.pad(); b * lt];
        let mut feats = vec![0f32; b * lt * (GAP_FEATURES + vd)];
        let mut pos = vec![0f32; b * l * dim];
        let mut vis = vec![0f32; b * lv.max(1) * vd];
        let mut valid = vec![vec![false; l]; b];
        let mut gather = Vec::new();
        let mut owners = Vec::new();
        let text_pos = sincos_encoding(&(0..lt).map(|i| i as f64).collect::<Vec<_>>(), dim, 10_000.0);
        for (wi, (w, seq)) in windows.iter().zip(&seqs).enumerate() {
            if w.visual.ncols() != vd && w.visual.nrows() > 0 {
                return Err(ProposerError::DimMismatch {
                    expected: vd,
                    got: w.visual.ncols(),
                });
            }
            for (ti, tok) in seq.tokens.iter().enumerate() {
                ids[wi * lt + ti] = self.vocab.id(tok);
                valid[wi][ti] = true;
                let off = (wi * l + ti) * dim;
                pos[off..off + dim].copy_from_slice(&text_pos[ti * dim..(ti + 1) * dim]);
            }
            for (gi, &mp) in seq.mask_positions.iter().enumerate() {
                let f = self.gap_features(w, gi, seq.gap_slots[gi]);
                let off = (wi * lt + mp) * (GAP_FEATURES + vd);
                feats[off..off + f.len()].copy_from_slice(&f);
                let g = &w.gaps[gi];
                if !self.config.in_band(g.duration()) || (only_labeled && g.label == GapLabel::Unlabeled) {
                    continue;
                }
                gather.push((wi * l + mp) as u32);
                owners.push((wi, gi));
            }
            if lv > 0 {
                let rel: Vec<f64> = w
                    .visual_times
                    .iter()
                    .map(|t| (t - w.window_start_s) / TIME_RESOLUTION_S)
                    .collect();
                let enc = sincos_encoding(&rel, dim, 10_000.0);
                for (ri, row) in w.visual.rows().into_iter().enumerate() {
                    let off = (wi * lv + ri) * vd;
                    for (j, v) in row.iter().enumerate() {
                        vis[off + j] = *v;
                    }
                    valid[wi][lt + ri] = true;
                    let poff = (wi * l + lt + ri) * dim;
                    pos[poff..poff + dim].copy_from_slice(&enc[ri * dim..(ri + 1) * dim]);
                }
            }
        }
        if gather.is_empty() {
            return Ok(None);
        }
        let ids = Tensor::from_vec(ids, (b, lt), &dev)?;
        let feats = Tensor::from_vec(feats, (b, lt, GAP_FEATURES + vd), &dev)?;
        let text = (self.tok_emb.forward(&ids)? + self.gap_proj.forward(&feats)?)?;
        let x = if lv > 0 {
            let vis = Tensor::from_vec(vis, (b, lv, vd), &dev)?;
            Tensor::cat(&[&text, &self.vis_proj.forward(&vis)?], 1)?
        } else {
            text
        };
        let pos = Tensor::from_vec(pos, (b, l, dim), &dev)?;
        let n = gather.len();
        Ok(Some(EncodedBatch {
            input: (x + pos)?,
            mask: key_padding_mask(&valid, DType::F32, &dev)?,
            gather: Tensor::from_vec(gather, n, &dev)?,
            owners,
        }))
    }

    fn logits(&self, batch: &EncodedBatch) -> candle_core::Result<Tensor> {
        let mut x = batch.input.clone();
        for b in &self.blocks {
            x = b.forward(&x, &batch.mask)?;
        }
        let (bsz, l, d) = x.dims3()?;
        let picked = self.norm.forward(&x)?.reshape((bsz * l, d))?.index_select(&batch.gather, 0)?;
        self.head.forward(&picked)?.squeeze(D::Minus1)
    }

    /// Per-gap predictions for each window, in gap order.
    pub fn classify_windows(&self, windows: &[ContextWindow]) -> Result<Vec<Vec<GapPrediction>>, ProposerError> {
        if !self.trained {
            return Err(ProposerError::UntrainedModel);
        }
        let mut out: Vec<Vec<GapPrediction>> = windows
            .iter()
            .map(|w| {
                w.gaps
                    .iter()
                    .map(|g| match self.config.hard_rule(g.duration()) {
                        Some(b) => GapPrediction::HardRule(b),
                        None => GapPrediction::Model(f64::NAN),
                    })
                    .collect()
            })
            .collect();
        for (ci, chunk) in windows.chunks(32).enumerate() {
            let refs: Vec<&ContextWindow> = chunk.iter().collect();
            let Some(batch) = self.encode(&refs, false)? else { continue };
            let logits = self.logits(&batch)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for (&(wi, gi), z) in batch.owners.iter().zip(logits) {
                out[ci * 32 + wi][gi] = GapPrediction::Model(sigmoid(z));
            }
        }
        Ok(out)
    }

    pub fn classify_gaps(&self, window: &ContextWindow) -> Result<Vec<GapPrediction>, ProposerError> {
        window.validate()?;
        Ok(self.classify_windows(std::slice::from_ref(window))?.remove(0))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, ProposerError> {
        let saved = SavedProposer {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        Ok(Checkpoint::new(serde_json::to_string(&saved)?, self.store.snapshot()?))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ProposerError> {
        let mut saved: SavedProposer = serde_json::from_str(&ck.config)?;
        saved.vocab.reindex();
        let mut model = Self::new(saved.config, saved.vocab, 0)?;
        model.store.load(&ck.tensors)?;
        model.trained = true;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProposerError> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ProposerError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
}

impl Default for ProposerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            lr: 1e-4,
            warmup_steps: 0,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProposerReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Vocabulary over the speech text of `windows`.
pub fn build_vocab(windows: &[ContextWindow]) -> Vocab {
    Vocab::build(windows.iter().flat_map(|w| w.speech.iter().map(|s| s.text.as_str())))
}

impl ProposerModel {
    fn targets(&self, windows: &[&ContextWindow], batch: &EncodedBatch) -> candle_core::Result<Tensor> {
        let y: Vec<f32> = batch
            .owners
            .iter()
            .map(|&(wi, gi)| if windows[wi].gaps[gi].label == GapLabel::ContainsAd { 1.0 } else { 0.0 })
            .collect();
        let n = y.len();
        Tensor::from_vec(y, n, self.store.device())
    }

    fn mean_loss(&self, windows: &[ContextWindow], batch_size: usize) -> Result<f64, ProposerError> {
        let (mut num, mut den) = (0.0, 0.0);
        for chunk in windows.chunks(batch_size.max(1)) {
            let refs: Vec<&ContextWindow> = chunk.iter().collect();
            let Some(batch) = self.encode(&refs, true)? else { continue };
            let y = self.targets(&refs, &batch)?;
            let w = y.ones_like()?;
            let logits = self.logits(&batch)?.detach();
            let n = batch.owners.len() as f64;
            num += weighted_bce_with_logits(&logits, &y, &w)?.to_scalar::<f32>()? as f64 * n;
            den += n;
        }
        Ok(if den > 0.0 { num / den } else { 0.0 })
    }

    /// BCE training on the labeled in-band gaps of `windows`.
    pub fn train(
        &mut self,
        windows: &[ContextWindow],
        cfg: &ProposerTrainConfig,
        seed: u64,
    ) -> Result<ProposerReport, ProposerError> {
        let (mut pos, mut neg) = (0usize, 0usize);
        for w in windows {
            w.validate()?;
            for g in &w.gaps {
                if self.config.in_band(g.duration()) {
                    match g.label {
                        GapLabel::ContainsAd => pos += 1,
                        GapLabel::NoAd => neg += 1,
                        GapLabel::Unlabeled => {}
                    }
                }
            }
        }
        if pos == 0 || neg == 0 {
            return Err(ProposerError::DegenerateDataset(format!(
                "{pos} positive and {neg} negative in-band gaps"
            )));
        }
        let batch_size = cfg.batch_size.max(1);
        let mut report = ProposerReport {
            initial_loss: self.mean_loss(windows, batch_size)?,
            ..Default::default()
        };
        let steps_per_epoch = windows.len().div_ceil(batch_size);
        let schedule = LrSchedule {
            base_lr: cfg.lr,
            warmup_steps: cfg.warmup_steps,
            total_steps: steps_per_epoch * cfg.epochs,
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
        let mut order: Vec<usize> = (0..windows.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut last = f64::NAN;
            for chunk in order.chunks(batch_size) {
                let refs: Vec<&ContextWindow> = chunk.iter().map(|&i| &windows[i]).collect();
                let Some(batch) = self.encode(&refs, true)? else { continue };
                let y = self.targets(&refs, &batch)?;
                let loss = weighted_bce_with_logits(&self.logits(&batch)?, &y, &y.ones_like()?)?;
                opt.set_learning_rate(schedule.lr_at(report.steps));
                opt.backward_step(&loss)?;
                report.steps += 1;
                last = loss.to_scalar::<f32>()? as f64;
            }
            debug!("proposer epoch {epoch}: last batch loss {last:.4}");
        }
        report.final_loss = self.mean_loss(windows, batch_size)?;
        self.trained = true;
        Ok(report)
    }
}

/// Decisions of the fixed-threshold rule `duration >= threshold`.
pub fn duration_baseline(gaps: &[GapSample], threshold_s: f64) -> Vec<bool> {
    gaps.iter().map(|g| g.duration() >= threshold_s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub auc: f64,
    pub ap: f64,
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Sweeps the duration threshold over 100 values evenly spaced in [2, 6] s.
///
/// ROC-AUC is the trapezoidal area of the swept curve closed by (0, 0) and
/// (1, 1); AP is the step sum of precision over recall increments.
pub fn duration_sweep(gaps: &[GapSample]) -> Result<SweepResult, ProposerError> {
    let labeled: Vec<(f64, bool)> = gaps
        .iter()
        .filter_map(|g| g.label.as_bool().map(|y| (g.duration(), y)))
        .collect();
    if labeled.is_empty() {
        return Err(ProposerError::NoLabeledGaps);
    }
    let p = labeled.iter().filter(|(_, y)| *y).count() as f64;
    let n = labeled.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return Err(ProposerError::SingleClass);
    }
    let thresholds: Vec<f64> = (0..SWEEP_POINTS)
        .map(|i| 2.0 + 4.0 * i as f64 / (SWEEP_POINTS - 1) as f64)
        .collect();
    let (mut tpr, mut fpr, mut precision) = (Vec::new(), Vec::new(), Vec::new());
    for &t in &thresholds {
        let tp = labeled.iter().filter(|(d, y)| *y && *d >= t).count() as f64;
        let fp = labeled.iter().filter(|(d, y)| !*y && *d >= t).count() as f64;
        tpr.push(tp / p);
        fpr.push(fp / n);
        precision.push(if tp + fp > 0.0 { tp / (tp + fp) } else { 1.0 });
    }
    // Highest threshold first: recall and false-positive rate both grow.
    let mut auc = 0.0;
    let (mut px, mut py) = (0.0, 0.0);
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in (0..SWEEP_POINTS).rev() {
        auc += (fpr[i] - px) * (tpr[i] + py) / 2.0;
        px = fpr[i];
        py = tpr[i];
        ap += (tpr[i] - prev_r) * precision[i];
        prev_r = tpr[i];
    }
    auc += (1.0 - px) * (1.0 + py) / 2.0;
    Ok(SweepResult {
        auc,
        ap,
        thresholds,
        tpr,
        fpr,
        precision,
    })
}

/// One row of the proposals CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub movie_id: String,
    pub gap_start_s: f64,
    pub gap_end_s: f64,
    pub probability: f64,
    pub decision: bool,
}

/// Window start times `0, stride, 2*stride, ...` covering `[0, end_s)`.
pub fn window_starts(end_s: f64, stride_s: f64) -> Vec<f64> {
    let mut starts = vec![0.0];
    let mut k = 1;
    while (k as f64) * stride_s + WINDOW_S - stride_s < end_s {
        starts.push(k as f64 * stride_s);
        k += 1;
    }
    starts
}

pub fn movie_windows(record: &MovieRecord, stride_s: f64) -> Result<Vec<ContextWindow>, ProposerError> {
    if !(stride_s > 0.0) {
        return Err(ProposerError::Config(format!("stride {stride_s} must be positive")));
    }
    let speech = speech_timeline(record);
    window_starts(movie_end(record, &speech), stride_s)
        .into_iter()
        .map(|s| ContextWindow::from_record(record, &speech, s))
        .collect()
}

fn movie_end(record: &MovieRecord, speech: &[TimedText]) -> f64 {
    speech
        .iter()
        .map(|s| s.end_s)
        .fold(record.track.last_timestamp(), f64::max)
}

/// Sliding-window proposals for every speech gap of a movie.
///
/// Each in-band gap's probability is the mean over the windows that contain
/// it whole; gaps never contained whole fall back to every window that
/// overlaps them.
pub fn propose_movie(model: &ProposerModel, record: &MovieRecord, stride_s: f64) -> Result<Vec<Proposal>, ProposerError> {
    if !model.is_trained() {
        return Err(ProposerError::UntrainedModel);
    }
    let speech = speech_timeline(record);
    let end = movie_end(record, &speech);
    let windows = movie_windows(record, stride_s)?;
    let preds = model.classify_windows(&windows)?;
    let cfg = model.config();
    let mut out = Vec::new();
    for (a, b) in extract_gaps(&speech, 0.0, end)? {
        let (probability, decision) = match cfg.hard_rule(b - a) {
            Some(d) => (f64::from(u8::from(d)), d),
            None => {
                let mut whole = Vec::new();
                let mut partial = Vec::new();
                for (w, p) in windows.iter().zip(&preds) {
                    for (g, gp) in w.gaps.iter().zip(p) {
                        if g.end_s <= a || g.start_s >= b {
                            continue;
                        }
                        let exact = (g.start_s - a).abs() < 1e-9 && (g.end_s - b).abs() < 1e-9;
                        if exact {
                            whole.push(gp.probability());
                        } else {
                            partial.push(gp.probability());
                        }
                    }
                }
                let src = if whole.is_empty() { &partial } else { &whole };
                let p = if src.is_empty() { 0.0 } else { src.iter().sum::<f64>() / src.len() as f64 };
                (p, p >= cfg.threshold)
            }
        };
        out.push(Proposal {
            movie_id: record.movie_id.clone(),
            gap_start_s: a,
            gap_end_s: b,
            probability,
            decision,
        });
    }
    Ok(out)
}

/// CSV with header `movie_id,gap_start_s,gap_end_s,probability,decision`,
/// preceded by a `# config_hash=` line when a hash is given.
pub fn proposals_to_csv(proposals: &[Proposal], config_hash: Option<&str>) -> Result<Vec<u8>, ProposerError> {
    let mut buf = Vec::new();
    if let Some(h) = config_hash {
        buf.extend_from_slice(format!("# config_hash={h}\n").as_bytes());
    }
    let mut w = csv::Writer::from_writer(&mut buf);
    w.write_record(["movie_id", "gap_start_s", "gap_end_s", "probability", "decision"])?;
    for p in proposals {
        w.write_record([
            p.movie_id.clone(),
            format!("{:.3}", p.gap_start_s),
            format!("{:.3}", p.gap_end_s),
            format!("{:.6}", p.probability),
            if p.decision { "AD" } else { "NO_AD" }.to_string(),
        ])?;
    }
    w.flush()?;
    drop(w);
    Ok(buf)
}

pub fn parse_proposals(data: &[u8]) -> Result<Vec<Proposal>, ProposerError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(data);
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64, ProposerError> {
            row.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| ProposerError::InvalidWindow(format!("bad proposal row {row:?}")))
        };
        out.push(Proposal {
            movie_id: row.get(0).unwrap_or_default().to_string(),
            gap_start_s: num(1)?,
            gap_end_s: num(2)?,
            probability: num(3)?,
            decision: row.get(4).map(|s| s.trim() == "AD").unwrap_or(false),
        });
    }
    Ok(out)
}
