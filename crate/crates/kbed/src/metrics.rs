//! Reconstruction and segmentation quality metrics: PSNR, SSIM (uniform
//! 7x7 window, k1 = 0.01, k2 = 0.03), and Dice overlap.
//!
//! PSNR and SSIM compare magnitude images; the reference defines the peak
//! and the data range, so PSNR is not symmetric in its arguments. Dice is
//! computed on the positive class after thresholding soft segmentations
//! at 0.5.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::TargetState;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)` with the peak taken from the reference.
/// Returns `f64::INFINITY` when the images agree exactly.
pub fn psnr(reference: &Array2<f64>, estimate: &Array2<f64>) -> Result<f64> {
    check_same_shape(reference, estimate)?;
    let peak = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(
            "psnr reference must not be identically zero".into(),
        ));
    }
    let n = reference.len() as f64;
    let mse = reference
        .iter()
        .zip(estimate.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean local SSIM over every valid uniform window. The data range comes
/// from the reference; a constant reference falls back to a unit range so
/// the stabilizing constants stay positive.
pub fn ssim(reference: &Array2<f64>, estimate: &Array2<f64>) -> Result<f64> {
    ssim_with(reference, estimate, SSIM_WINDOW, SSIM_K1, SSIM_K2)
}

pub fn ssim_with(
    reference: &Array2<f64>,
    estimate: &Array2<f64>,
    window: usize,
    k1: f64,
    k2: f64,
) -> Result<f64> {
    check_same_shape(reference, estimate)?;
    let (rows, cols) = reference.dim();
    if rows < window || cols < window {
        return Err(Error::InvalidParameter(format!(
            "image {rows}x{cols} smaller than the {window}x{window} ssim window"
        )));
    }
    let lo = reference.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (k1 * range) * (k1 * range);
    let c2 = (k2 * range) * (k2 * range);

    let np = (window * window) as f64;
    let mut acc = 0.0;
    let mut count = 0usize;
    for r0 in 0..=(rows - window) {
        for c0 in 0..=(cols - window) {
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            for r in r0..r0 + window {
                for c in c0..c0 + window {
                    let x = reference[[r, c]];
                    let y = estimate[[r, c]];
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let mx = sx / np;
            let my = sy / np;
            let vx = sxx / np - mx * mx;
            let vy = syy / np - my * my;
            let cov = sxy / np - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Dice overlap on the positive class; two empty masks agree perfectly.
pub fn dice(reference_mask: &Array2<bool>, estimate_mask: &Array2<bool>) -> Result<f64> {
    if reference_mask.dim() != estimate_mask.dim() {
        return Err(Error::shape(
            format!("{:?}", reference_mask.dim()),
            format!("{:?}", estimate_mask.dim()),
        ));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&a, &b) in reference_mask.iter().zip(estimate_mask.iter()) {
        match (a, b) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64))
}

/// Bundle of the per-reconstruction metrics; Dice only when segmentation
/// ground truth was supplied.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub dice: Option<f64>,
}

/// Compare magnitudes of the truth and estimate, plus Dice on segmentations
/// thresholded at 0.5 when requested.
pub fn evaluate(truth: &TargetState, estimate: &TargetState, with_seg: bool) -> Result<MetricReport> {
    let ref_mag = truth.image().magnitude();
    let est_mag = estimate.image().magnitude();
    let psnr_v = psnr(&ref_mag, &est_mag)?;
    let ssim_v = ssim(&ref_mag, &est_mag)?;
    let dice_v = if with_seg {
        Some(dice(&truth.seg_binary(0.5), &estimate.seg_binary(0.5))?)
    } else {
        None
    };
    Ok(MetricReport {
        psnr: psnr_v,
        ssim: ssim_v,
        dice: dice_v,
    })
}
