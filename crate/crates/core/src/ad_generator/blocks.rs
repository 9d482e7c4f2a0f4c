//! Perceiver resampler and tanh-gated cross-attention blocks.

use candle_core::{Module, Result, Tensor};
use candle_nn::{Init, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::nn::layers::{linear, FeedForward, LayerNorm, MultiHeadAttention};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplerConfig {
    pub num_latents: usize,
    pub num_blocks: usize,
    pub channels: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub proj_in: usize,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self {
            num_latents: 10,
            num_blocks: 2,
            channels: 768,
            heads: 12,
            ff_dim: 3072,
            proj_in: 512,
        }
    }
}

#[derive(Debug, Clone)]
struct ResamplerBlock {
    ln_media: LayerNorm,
    ln_latents: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Learned latents attending to `[projected media; latents]`.
#[derive(Debug, Clone)]
pub struct Resampler {
    proj: Linear,
    latents: Tensor,
    blocks: Vec<ResamplerBlock>,
    norm: LayerNorm,
    num_latents: usize,
}

impl Resampler {
    pub fn new(cfg: &ResamplerConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.heads == 0 || cfg.channels % cfg.heads != 0 {
            candle_core::bail!("resampler channels {} not divisible by {} heads", cfg.channels, cfg.heads);
        }
        if cfg.num_latents == 0 {
            candle_core::bail!("resampler needs at least one latent");
        }
        let latents = vb.get_with_hints(
            (cfg.num_latents, cfg.channels),
            "latents",
            Init::Randn { mean: 0.0, stdev: 0.02 },
        )?;
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                let vb = vb.pp(format!("blocks.{i}"));
                Ok(ResamplerBlock {
                    ln_media: LayerNorm::new(cfg.channels, vb.pp("ln_media"))?,
                    ln_latents: LayerNorm::new(cfg.channels, vb.pp("ln_latents"))?,
                    attn: MultiHeadAttention::new(cfg.channels, cfg.channels, cfg.heads, vb.pp("attn"))?,
                    ln_ff: LayerNorm::new(cfg.channels, vb.pp("ln_ff"))?,
                    ff: FeedForward::new(cfg.channels, cfg.ff_dim, vb.pp("ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            proj: linear(cfg.proj_in, cfg.channels, vb.pp("proj"))?,
            latents,
            blocks,
            norm: LayerNorm::new(cfg.channels, vb.pp("norm"))?,
            num_latents: cfg.num_latents,
        })
    }

    /// `media`: (B, M, proj_in); `media_mask`: additive (B, 1, 1, M) or none.
    /// Returns (B, num_latents, channels).
    pub fn forward(&self, media: &Tensor, media_mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, _, _) = media.dims3()?;
        let x = self.proj.forward(media)?;
        let (_, c) = self.latents.dims2()?;
        let mut z = self.latents.unsqueeze(0)?.broadcast_as((b, self.num_latents, c))?.contiguous()?;
        let mask = match media_mask {
            Some(m) => {
                let open = Tensor::zeros((b, 1, 1, self.num_latents), m.dtype(), m.device())?;
                Some(Tensor::cat(&[m, &open], 3)?)
            }
            None => None,
        };
        for blk in &self.blocks {
            let zq = blk.ln_latents.forward(&z)?;
            let kv = Tensor::cat(&[&blk.ln_media.forward(&x)?, &zq], 1)?;
            z = (&z + blk.attn.forward(&zq, &kv, mask.as_ref())?)?;
            z = (&z + blk.ff.forward(&blk.ln_ff.forward(&z)?)?)?;
        }
        self.norm.forward(&z)
    }
}

/// Residual cross-attention and feed-forward, each scaled by `tanh(g)` with
/// `g` starting at zero.
#[derive(Debug, Clone)]
pub struct GatedXAttn {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    g_attn: Tensor,
    ln_ff: LayerNorm,
    ff: FeedForward,
    g_ff: Tensor,
}

impl GatedXAttn {
    pub fn new(dim: usize, kv_dim: usize, heads: usize, ff_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(dim, vb.pp("ln_attn"))?,
            attn: MultiHeadAttention::new(dim, kv_dim, heads, vb.pp("attn"))?,
            g_attn: vb.get_with_hints(1, "g_attn", Init::Const(0.0))?,
            ln_ff: LayerNorm::new(dim, vb.pp("ln_ff"))?,
            ff: FeedForward::new(dim, ff_dim, vb.pp("ff"))?,
            g_ff: vb.get_with_hints(1, "g_ff", Init::Const(0.0))?,
        })
    }

    /// `h_{j+1} = h_j + tanh(g) * XAttn(h_j, x)`, then the gated feed-forward.
    pub fn forward(&self, h: &Tensor, latents: &Tensor) -> Result<Tensor> {
        let a = self.attn.forward(&self.ln_attn.forward(h)?, latents, None)?;
        let h = (h + a.broadcast_mul(&self.g_attn.tanh()?)?)?;
        let f = self.ff.forward(&self.ln_ff.forward(&h)?)?;
        &h + f.broadcast_mul(&self.g_ff.tanh()?)?
    }
}
