//! Reconstruction quality: relative ℓ₁/ℓ₂ errors over the whole space-time
//! stack and frame-averaged SSIM.
//!
//! SSIM here uses whole-frame statistics (no sliding window) with population
//! (1/N) variances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::ImageSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub rel_l1: f64,
    pub rel_l2: f64,
    pub ssim: f64,
    pub per_frame_ssim: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
}

/// SSIM stabilisers `(c1, c2) = ((0.01 L)², (0.03 L)²)` for dynamic range `L`.
pub fn default_constants(dynamic_range: f64) -> (f64, f64) {
    ((0.01 * dynamic_range).powi(2), (0.03 * dynamic_range).powi(2))
}

/// `max − min` over the whole sequence.
pub fn dynamic_range(u: &ImageSequence) -> f64 {
    let (lo, hi) = u
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

fn check_shapes(recon: &ImageSequence, truth: &ImageSequence) -> Result<()> {
    if recon.shape() != truth.shape() {
        return Err(Error::mismatch(format!(
            "reconstruction shape {:?} differs from ground truth shape {:?}",
            recon.shape(),
            truth.shape()
        )));
    }
    Ok(())
}

/// `‖recon − truth‖_e / ‖truth‖_e` for `e ∈ {1, 2}`.
pub fn relative_error(recon: &ImageSequence, truth: &ImageSequence, exponent: u32) -> Result<f64> {
    check_shapes(recon, truth)?;
    let pairs = recon.as_slice().iter().zip(truth.as_slice());
    let (num, den) = match exponent {
        1 => pairs.fold((0.0, 0.0), |(n, d), (r, t)| (n + (r - t).abs(), d + t.abs())),
        2 => {
            let (n, d) = pairs.fold((0.0, 0.0), |(n, d), (r, t)| (n + (r - t) * (r - t), d + t * t));
            (n.sqrt(), d.sqrt())
        }
        e => return Err(Error::invalid(format!("error exponent must be 1 or 2, got {e}"))),
    };
    if den == 0.0 {
        return Err(Error::invalid("ground truth has zero norm"));
    }
    Ok(num / den)
}

/// Global SSIM of two equally sized frames.
pub fn ssim_frame(a: &[f64], b: &[f64], c1: f64, c2: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "ssim_frame: frames differ in size");
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - mu_a;
        let dy = y - mu_b;
        var_a += dx * dx;
        var_b += dy * dy;
        cov += dx * dy;
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Per-frame SSIM values.
pub fn ssim_frames(recon: &ImageSequence, truth: &ImageSequence, c1: f64, c2: f64) -> Result<Vec<f64>> {
    check_shapes(recon, truth)?;
    Ok(recon
        .frames()
        .zip(truth.frames())
        .map(|(a, b)| ssim_frame(a, b, c1, c2))
        .collect())
}

/// Mean of the per-frame SSIM over all frames.
pub fn ssim_sequence(recon: &ImageSequence, truth: &ImageSequence, c1: f64, c2: f64) -> Result<f64> {
    let per = ssim_frames(recon, truth, c1, c2)?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// All three headline numbers, with SSIM constants from the truth's dynamic
/// range unless given explicitly.
pub fn evaluate(
    label: &str,
    recon: &ImageSequence,
    truth: &ImageSequence,
    constants: Option<(f64, f64)>,
) -> Result<MetricReport> {
    let (c1, c2) = constants.unwrap_or_else(|| default_constants(dynamic_range(truth)));
    let per_frame_ssim = ssim_frames(recon, truth, c1, c2)?;
    Ok(MetricReport {
        label: label.to_string(),
        rel_l1: relative_error(recon, truth, 1)?,
        rel_l2: relative_error(recon, truth, 2)?,
        ssim: per_frame_ssim.iter().sum::<f64>() / per_frame_ssim.len().max(1) as f64,
        per_frame_ssim,
        c1,
        c2,
    })
}
