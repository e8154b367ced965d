//! Training objectives and mixup augmentation.
//!
//! The differentiable losses are thin wrappers over the autodiff ops;
//! mixup operates on raw waveforms and label vectors before any feature
//! extraction, since log compression would break label-proportional
//! mixing of the features themselves.

use rand_distr::{Beta, Distribution};

use crate::autodiff::{self as ad, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Binary cross-entropy against a (possibly soft) label in [0, 1].
pub fn bce<T: Scalar>(p: &Tensor<T>, y: f64) -> Result<Tensor<T>> {
    ad::bce_loss(p, y)
}

/// Mean squared error over frames.
pub fn mse_frames<T: Scalar>(p: &Tensor<T>, y: &[T]) -> Result<Tensor<T>> {
    ad::mse_loss(p, y)
}

/// Smoothed soft-IoU loss: 1 − (Σp·y + s)/(Σp + Σy − Σp·y + s).
pub fn soft_iou<T: Scalar>(p: &Tensor<T>, y: &[T]) -> Result<Tensor<T>> {
    ad::soft_iou_loss(p, y)
}

/// Track-2 objective: mse_frames + beta · soft_iou.
pub fn streaming_loss<T: Scalar>(p: &Tensor<T>, y: &[T], beta: f64) -> Result<Tensor<T>> {
    let mse = mse_frames(p, y)?;
    let iou = soft_iou(p, y)?;
    ad::add(&mse, &ad::scale(&iou, T::from_f64(beta)))
}

#[derive(Debug, Clone, Copy)]
pub struct MixupConfig {
    pub alpha: f64,
    pub enabled: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig { alpha: 0.2, enabled: true }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "mixup.alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Mixing coefficient for one pairing: Beta(alpha, alpha) when mixup is
/// enabled, otherwise 1 (which leaves the first sample untouched).
pub fn sample_lambda(cfg: &MixupConfig, rng: &mut SplitMix64) -> Result<f64> {
    cfg.validate()?;
    if !cfg.enabled {
        return Ok(1.0);
    }
    let beta = Beta::new(cfg.alpha, cfg.alpha)
        .map_err(|e| Error::Config(format!("mixup.alpha={}: {e}", cfg.alpha)))?;
    Ok(beta.sample(rng))
}

/// Convex combination of two waveform windows and their label vectors:
/// x̃ = λ·x1 + (1−λ)·x2 and likewise for y. Scalar labels are length-1
/// slices.
pub fn mixup(
    x1: &[[f32; 3]],
    y1: &[f64],
    x2: &[[f32; 3]],
    y2: &[f64],
    lambda: f64,
) -> Result<(Vec<[f32; 3]>, Vec<f64>)> {
    if x1.len() != x2.len() || y1.len() != y2.len() {
        return Err(Error::Shape(format!(
            "mixup: waveforms {} vs {}, labels {} vs {}",
            x1.len(),
            x2.len(),
            y1.len(),
            y2.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Usage(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    let l = lambda as f32;
    let x = x1
        .iter()
        .zip(x2)
        .map(|(a, b)| {
            [
                l * a[0] + (1.0 - l) * b[0],
                l * a[1] + (1.0 - l) * b[1],
                l * a[2] + (1.0 - l) * b[2],
            ]
        })
        .collect();
    let y = y1
        .iter()
        .zip(y2)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok((x, y))
}

/// Uniform pairing permutation for intra-batch mixup.
pub fn mixup_partners(batch: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..batch).collect();
    rng.shuffle(&mut idx);
    idx
}
