//! Training objectives: least-squares adversarial loss, L1 cycle and identity
//! terms, and the Non-Mask Change (NMC) loss that pins generated pixels
//! outside the mask region to the rule-based input.
//!
//! Every loss comes in two forms: a scalar for a single image pair (the
//! public contract) and a batch form returning the analytic gradient used by
//! the trainer.

use ndarray::{Array2, Array4, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_core::{ImageTensor, RegionMask};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_identity: f64,
    pub lambda_nmc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_a: 10.0, lambda_b: 10.0, lambda_identity: 0.5, lambda_nmc: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_a, self.lambda_b, self.lambda_identity, self.lambda_nmc];
        if all.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Unweighted loss components of one generator step.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct GenLossParts {
    pub adv_ab: f64,
    pub adv_ba: f64,
    pub cycle_a: f64,
    pub cycle_b: f64,
    pub idt_a: f64,
    pub idt_b: f64,
    pub nmc: f64,
}

/// Combines the parts:
/// `adv_ab + adv_ba + lambda_a*cycle_a + lambda_b*cycle_b
///  + lambda_identity*(lambda_b*idt_a + lambda_a*idt_b) + lambda_nmc*nmc`.
///
/// Each identity term is scaled by its generator's *target* domain weight.
pub fn total_generator_loss(parts: &GenLossParts, w: &LossWeights) -> f64 {
    parts.adv_ab
        + parts.adv_ba
        + w.lambda_a * parts.cycle_a
        + w.lambda_b * parts.cycle_b
        + w.lambda_identity * (w.lambda_b * parts.idt_a + w.lambda_a * parts.idt_b)
        + w.lambda_nmc * parts.nmc
}

fn check_same_shape3(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean absolute difference between the rule-based image and the generated
/// image over every element *outside* the mask region, normalized by the
/// total element count. All-true regions therefore give exactly 0.
pub fn nmc_loss(rule_based: &ImageTensor, generated: &ImageTensor, region: &RegionMask) -> Result<f64> {
    check_same_shape3(rule_based.data(), generated.data())?;
    if (region.height(), region.width()) != (rule_based.height(), rule_based.width()) {
        return Err(Error::DimensionMismatch(format!(
            "region {}x{} vs image {}x{}",
            region.height(),
            region.width(),
            rule_based.height(),
            rule_based.width()
        )));
    }
    let (h, w, c) = rule_based.data().dim();
    let total = (h * w * c) as f64;
    let mut sum = 0.0;
    for i in 0..h {
        for j in 0..w {
            if region.data()[[i, j]] {
                continue;
            }
            for ch in 0..c {
                sum += (generated.data()[[i, j, ch]] - rule_based.data()[[i, j, ch]]).abs();
            }
        }
    }
    Ok(sum / total)
}

/// Batch NMC loss over `[N, 3, H, W]` tensors with per-sample region masks.
/// Returns the loss and its gradient with respect to `generated`. The
/// gradient is exactly zero at every in-region element.
pub fn nmc_loss_batch(
    rule_based: &Array4<f64>,
    generated: &Array4<f64>,
    regions: &[Array2<bool>],
) -> Result<(f64, Array4<f64>)> {
    if rule_based.dim() != generated.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            rule_based.dim(),
            generated.dim()
        )));
    }
    let (n, c, h, w) = rule_based.dim();
    if regions.len() != n {
        return Err(Error::DimensionMismatch(format!("{} regions for batch {n}", regions.len())));
    }
    let total = (n * c * h * w) as f64;
    let mut sum = 0.0;
    let mut grad = Array4::<f64>::zeros(rule_based.raw_dim());
    for ni in 0..n {
        let region = &regions[ni];
        if region.dim() != (h, w) {
            return Err(Error::DimensionMismatch(format!(
                "region {:?} vs image {}x{}",
                region.dim(),
                h,
                w
            )));
        }
        for i in 0..h {
            for j in 0..w {
                if region[[i, j]] {
                    continue;
                }
                for ch in 0..c {
                    let d = generated[[ni, ch, i, j]] - rule_based[[ni, ch, i, j]];
                    sum += d.abs();
                    grad[[ni, ch, i, j]] = if d == 0.0 { 0.0 } else { d.signum() / total };
                }
            }
        }
    }
    Ok((sum / total, grad))
}

/// Mean absolute difference over all elements.
pub fn cycle_loss(x: &ImageTensor, reconstructed: &ImageTensor) -> Result<f64> {
    check_same_shape3(x.data(), reconstructed.data())?;
    let n = x.data().len() as f64;
    let sum: f64 = x
        .data()
        .iter()
        .zip(reconstructed.data().iter())
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    Ok(sum / n)
}

/// Batch L1 loss; gradient is with respect to the first argument.
pub fn l1_loss_batch(pred: &Array4<f64>, target: &Array4<f64>) -> Result<(f64, Array4<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", pred.dim(), target.dim())));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = Array4::<f64>::zeros(pred.raw_dim());
    for ((g, &p), &t) in grad.iter_mut().zip(pred.iter()).zip(target.iter()) {
        let d = p - t;
        sum += d.abs();
        *g = if d == 0.0 { 0.0 } else { d.signum() } / n;
    }
    Ok((sum / n, grad))
}

/// Least-squares adversarial loss: mean squared error of the score map
/// against 1 (real) or 0 (fake).
pub fn adversarial_loss(scores: &Array4<f64>, target_real: bool) -> f64 {
    let t = if target_real { 1.0 } else { 0.0 };
    let n = scores.len() as f64;
    scores.iter().map(|&s| (s - t) * (s - t)).sum::<f64>() / n
}

/// Least-squares adversarial loss plus its gradient w.r.t. the scores.
pub fn adversarial_loss_grad(scores: &Array4<f64>, target_real: bool) -> (f64, Array4<f64>) {
    let t = if target_real { 1.0 } else { 0.0 };
    let n = scores.len() as f64;
    let loss = scores.iter().map(|&s| (s - t) * (s - t)).sum::<f64>() / n;
    let grad = scores.mapv(|s| 2.0 * (s - t) / n);
    (loss, grad)
}
