use candle_core::{DType, Device, Module, Result, Tensor, D};
use candle_nn::{Init, Linear, VarBuilder};

/// Additive mask value for blocked attention positions.
pub const MASK_NEG: f64 = -1e9;

/// Layer normalization written with primitive ops so it is differentiable.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints(dim, "weight", Init::Const(1.0))?;
        let bias = vb.get_with_hints(dim, "bias", Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / dim)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / dim)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

pub fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Linear> {
    candle_nn::linear(in_dim, out_dim, vb)
}

/// Linear layer with small normal weights and zero bias.
pub fn linear_small(in_dim: usize, out_dim: usize, std: f64, vb: VarBuilder) -> Result<Linear> {
    let w = vb.get_with_hints((out_dim, in_dim), "weight", Init::Randn { mean: 0.0, stdev: std })?;
    let b = vb.get_with_hints(out_dim, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

/// Multi-head attention where queries and keys/values may come from
/// sequences of different widths.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, kv_dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            candle_core::bail!("width {dim} is not divisible by {heads} heads");
        }
        Ok(Self {
            q: linear(dim, dim, vb.pp("q"))?,
            k: linear(kv_dim, dim, vb.pp("k"))?,
            v: linear(kv_dim, dim, vb.pp("v"))?,
            out: linear(dim, dim, vb.pp("out"))?,
            heads,
            head_dim: dim / heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        x.reshape((b, t, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// `x`: (B, Tq, dim); `ctx`: (B, Tk, kv_dim); `mask`: additive, broadcastable
    /// to (B, 1, Tq, Tk).
    pub fn forward(&self, x: &Tensor, ctx: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, tq, _) = x.dims3()?;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(ctx)?)?;
        let v = self.split_heads(&self.v.forward(ctx)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(mask)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let y = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, self.heads * self.head_dim))?;
        self.out.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc1: linear(dim, hidden, vb.pp("fc1"))?,
            fc2: linear(hidden, dim, vb.pp("fc2"))?,
        })
    }
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Lower-triangular additive mask of shape (1, 1, t, t).
pub fn causal_mask(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f64> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j <= i { 0.0 } else { MASK_NEG }))
        .collect();
    Tensor::from_vec(values, (1, 1, t, t), device)?.to_dtype(dtype)
}

/// Key-padding mask of shape (B, 1, 1, Tk) from per-row validity flags.
pub fn key_padding_mask(valid: &[Vec<bool>], dtype: DType, device: &Device) -> Result<Tensor> {
    let b = valid.len();
    let tk = valid.first().map(Vec::len).unwrap_or(0);
    let mut values = Vec::with_capacity(b * tk);
    for row in valid {
        if row.len() != tk {
            candle_core::bail!("ragged key mask");
        }
        values.extend(row.iter().map(|&ok| if ok { 0.0 } else { MASK_NEG }));
    }
    Tensor::from_vec(values, (b, 1, 1, tk), device)?.to_dtype(dtype)
}

/// Sinusoidal encoding of arbitrary real positions, shape (len, dim).
pub fn sincos_encoding(positions: &[f64], dim: usize, scale: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(positions.len() * dim);
    let half = dim / 2;
    for &p in positions {
        for i in 0..dim {
            let k = (i % half.max(1)) as f64;
            let freq = 1.0 / scale.powf(2.0 * k / dim as f64);
            let angle = p * freq;
            out.push(if i < half { angle.sin() } else { angle.cos() } as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;

    #[test]
    fn layer_norm_normalizes() {
        let store = ParamStore::new(0, DType::F64, true);
        let ln = LayerNorm::new(4, store.var_builder()).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        let var: f64 = y[0].iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let store = ParamStore::new(1, DType::F64, true);
        let attn = MultiHeadAttention::new(4, 4, 2, store.var_builder()).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::ones((1, 1, 4), DType::F64, &dev).unwrap();
        let ctx = Tensor::new(&[[[1.0f64, 0.0, 0.0, 0.0], [0.0, 5.0, 1.0, 2.0]]], &dev).unwrap();
        let ctx_other = Tensor::new(&[[[1.0f64, 0.0, 0.0, 0.0], [9.0, -3.0, 7.0, 0.5]]], &dev).unwrap();
        let mask = key_padding_mask(&[vec![true, false]], DType::F64, &dev).unwrap();
        let a = attn.forward(&x, &ctx, Some(&mask)).unwrap().to_vec3::<f64>().unwrap();
        let b = attn.forward(&x, &ctx_other, Some(&mask)).unwrap().to_vec3::<f64>().unwrap();
        for (u, v) in a[0][0].iter().zip(&b[0][0]) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let store = ParamStore::new(0, DType::F32, true);
        assert!(MultiHeadAttention::new(10, 10, 3, store.var_builder()).is_err());
    }
}
