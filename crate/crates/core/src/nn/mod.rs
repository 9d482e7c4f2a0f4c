//! Small neural-network toolkit on top of candle: seeded parameters,
//! attention layers, checkpoints and training helpers.

pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use params::ParamStore;
pub use train::LrSchedule;

use candle_core::{DType, Device, Tensor};
use ndarray::ArrayView2;

/// Copies a 2-D array into a tensor of the given dtype.
pub fn tensor_from_view(a: ArrayView2<f32>, dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
    let (r, c) = a.dim();
    let data: Vec<f32> = a.iter().copied().collect();
    Tensor::from_vec(data, (r, c), device)?.to_dtype(dtype)
}

/// Stacks variable-length row blocks into a zero-padded (B, max_len, D)
/// tensor plus per-row validity flags.
pub fn pad_batch(
    blocks: &[ArrayView2<f32>],
    dim: usize,
    dtype: DType,
    device: &Device,
) -> candle_core::Result<(Tensor, Vec<Vec<bool>>)> {
    let max_len = blocks.iter().map(|b| b.nrows()).max().unwrap_or(0).max(1);
    let mut data = vec![0f32; blocks.len() * max_len * dim];
    let mut valid = Vec::with_capacity(blocks.len());
    for (bi, block) in blocks.iter().enumerate() {
        for (ri, row) in block.rows().into_iter().enumerate() {
            let off = (bi * max_len + ri) * dim;
            for (j, v) in row.iter().enumerate() {
                data[off + j] = *v;
            }
        }
        valid.push((0..max_len).map(|i| i < block.nrows()).collect());
    }
    let t = Tensor::from_vec(data, (blocks.len(), max_len, dim), device)?.to_dtype(dtype)?;
    Ok((t, valid))
}
