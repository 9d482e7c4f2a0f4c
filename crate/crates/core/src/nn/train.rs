use std::f64::consts::PI;

use candle_core::{Result, Tensor, D};
use serde::{Deserialize, Serialize};

/// Linear warm-up followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            warmup_steps: 0,
            total_steps: 0,
        }
    }

    /// Learning rate for a zero-based step index.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Numerically stable binary cross-entropy on logits with per-element weights.
///
/// `loss = max(x, 0) - x*y + log(1 + exp(-|x|))`, weighted mean over elements.
pub fn weighted_bce_with_logits(logits: &Tensor, targets: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let relu = logits.relu()?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per = ((relu - (logits * targets)?)? + softplus)?;
    let weighted = (per * weights)?;
    weighted.sum_all()?.broadcast_div(&weights.sum_all()?)
}

/// Inverse-frequency weights so both classes carry equal total weight.
pub fn balanced_weights(labels: &[f32]) -> Vec<f32> {
    let n = labels.len() as f32;
    let pos = labels.iter().filter(|&&y| y > 0.5).count() as f32;
    let neg = n - pos;
    labels
        .iter()
        .map(|&y| {
            if y > 0.5 {
                if pos > 0.0 { n / (2.0 * pos) } else { 0.0 }
            } else if neg > 0.0 {
                n / (2.0 * neg)
            } else {
                0.0
            }
        })
        .collect()
}

/// Mean token cross-entropy over positions where `weights` is nonzero.
///
/// `logits`: (N, V); `targets`: (N,) u32; `weights`: (N,) float.
pub fn masked_cross_entropy(logits: &Tensor, targets: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = log_probs
        .gather(&targets.unsqueeze(1)?, 1)?
        .squeeze(1)?;
    let total = weights.sum_all()?;
    (picked * weights)?.sum_all()?.neg()?.broadcast_div(&total)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule {
            base_lr: 1.0,
            warmup_steps: 4,
            total_steps: 14,
        };
        assert!((s.lr_at(0) - 0.25).abs() < 1e-12);
        assert!((s.lr_at(3) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(4) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(9) - 0.5).abs() < 1e-12);
        assert!(s.lr_at(14).abs() < 1e-12);
        assert_eq!(LrSchedule::constant(0.3).lr_at(100), 0.3);
    }

    #[test]
    fn bce_matches_closed_form() {
        let dev = Device::Cpu;
        let logits = Tensor::new(&[2.0f64, -1.0, 0.0], &dev).unwrap();
        let targets = Tensor::new(&[1.0f64, 0.0, 1.0], &dev).unwrap();
        let weights = Tensor::new(&[1.0f64, 1.0, 2.0], &dev).unwrap();
        let got = weighted_bce_with_logits(&logits, &targets, &weights)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let l = |x: f64, y: f64| -(y * sigmoid(x).ln() + (1.0 - y) * (1.0 - sigmoid(x)).ln());
        let expected = (l(2.0, 1.0) + l(-1.0, 0.0) + 2.0 * l(0.0, 1.0)) / 4.0;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn balanced_weights_equalize_classes() {
        let w = balanced_weights(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(w, vec![2.0, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
        let pos: f32 = w[..1].iter().sum();
        let neg: f32 = w[1..].iter().sum();
        assert!((pos - neg).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_ignores_zero_weight_rows() {
        let dev = Device::Cpu;
        let logits = Tensor::new(&[[0.0f64, 0.0], [5.0, -5.0]], &dev).unwrap();
        let targets = Tensor::new(&[0u32, 1], &dev).unwrap();
        let weights = Tensor::new(&[1.0f64, 0.0], &dev).unwrap();
        let got = masked_cross_entropy(&logits, &targets, &weights)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((got - 2f64.ln()).abs() < 1e-12);
    }
}
