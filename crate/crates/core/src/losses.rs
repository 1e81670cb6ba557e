//! Smooth Jaccard (mask head), mean squared error (detection head) and the
//! background-ignoring smoothed L1 (positional embedding head).

use crate::error::{Error, Result};
use crate::groundtruth::PositionalTensor;
use crate::tensor::Tensor;

pub const JACCARD_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Pixels that contributed.
    pub pixel_count: usize,
}

fn same_len(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("prediction has {} values, target {}", pred.len(), target.len())));
    }
    Ok(())
}

fn jaccard_sums(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let (mut inter, mut total) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        inter += p * t;
        total += p + t;
    }
    (inter, total - inter)
}

/// `1 - (I + eps) / (U + eps)` with soft intersection `I = sum(p t)`.
pub fn smooth_jaccard(pred: &[f64], target: &[f64]) -> Result<LossValue> {
    same_len(pred, target)?;
    let (i, u) = jaccard_sums(pred, target);
    let value = 1.0 - (i + JACCARD_SMOOTH) / (u + JACCARD_SMOOTH);
    Ok(LossValue { value, pixel_count: pred.len() })
}

pub fn smooth_jaccard_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    same_len(pred, target)?;
    let (i, u) = jaccard_sums(pred, target);
    let num = i + JACCARD_SMOOTH;
    let den = u + JACCARD_SMOOTH;
    Ok(target.iter().map(|&t| -(t * den - num * (1.0 - t)) / (den * den)).collect())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<LossValue> {
    same_len(pred, target)?;
    let n = pred.len();
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(LossValue { value: if n > 0 { s / n as f64 } else { 0.0 }, pixel_count: n })
}

pub fn mse_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    same_len(pred, target)?;
    let k = 2.0 / pred.len().max(1) as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| k * (p - t)).collect())
}

/// Quadratic below `|e| = 1`, linear above. Targets live in `[0, 1]`, so the
/// quadratic branch usually applies; the linear one still matters for
/// out-of-range predictions during early training.
pub fn huber(e: f64) -> f64 {
    if e.abs() < 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

fn huber_grad(e: f64) -> f64 {
    if e.abs() < 1.0 {
        e
    } else {
        e.signum()
    }
}

fn check_positional(pred: &Tensor, target: &PositionalTensor) -> Result<()> {
    if pred.shape() != [6, target.height, target.width] {
        return Err(Error::Shape(format!(
            "expected [6, {}, {}] prediction, got {:?}",
            target.height,
            target.width,
            pred.shape()
        )));
    }
    Ok(())
}

/// Raw `(sum of huber terms, foreground pixel count)` for one sample.
pub fn masked_smooth_l1_sum(pred: &Tensor, target: &PositionalTensor) -> Result<(f64, usize)> {
    check_positional(pred, target)?;
    let plane = target.height * target.width;
    let (p, t) = (pred.data(), target.values.data());
    let mut sum = 0.0;
    let mut count = 0;
    for (i, &fg) in target.mask.data().iter().enumerate() {
        if !fg {
            continue;
        }
        count += 1;
        for c in 0..6 {
            sum += huber(p[c * plane + i] - t[c * plane + i]);
        }
    }
    Ok((sum, count))
}

/// Mean huber loss over foreground pixels x 6 channels; 0 without foreground.
pub fn masked_smooth_l1(pred: &Tensor, target: &PositionalTensor) -> Result<LossValue> {
    let (sum, count) = masked_smooth_l1_sum(pred, target)?;
    let value = if count > 0 { sum / (6 * count) as f64 } else { 0.0 };
    Ok(LossValue { value, pixel_count: count })
}

/// Gradient of `scale * sum(huber)` over foreground; background entries are exactly 0.
pub fn masked_smooth_l1_grad_scaled(pred: &Tensor, target: &PositionalTensor, scale: f64) -> Result<Tensor> {
    check_positional(pred, target)?;
    let plane = target.height * target.width;
    let mut g = Tensor::zeros(pred.shape());
    let (p, t) = (pred.data(), target.values.data());
    let gd = g.data_mut();
    for (i, &fg) in target.mask.data().iter().enumerate() {
        if fg {
            for c in 0..6 {
                let k = c * plane + i;
                gd[k] = scale * huber_grad(p[k] - t[k]);
            }
        }
    }
    Ok(g)
}

pub fn masked_smooth_l1_grad(pred: &Tensor, target: &PositionalTensor) -> Result<Tensor> {
    let (_, count) = masked_smooth_l1_sum(pred, target)?;
    let scale = if count > 0 { 1.0 / (6 * count) as f64 } else { 0.0 };
    masked_smooth_l1_grad_scaled(pred, target, scale)
}
