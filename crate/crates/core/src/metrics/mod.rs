//! Quality metrics (PSNR, SSIM components, MS-SSIM) and the training losses
//! built from them.

mod loss;
mod ssim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub use loss::{mae_loss, ms_ssim_graph, total_loss, LossPhase, LossTerms};
pub use ssim::{ms_ssim, ms_ssim_planes, ssim_components, GaussianWindow, Plane, SsimComponents};

/// Reference MS-SSIM scale weights, rescaled so they sum to one.
pub const MS_SSIM_WEIGHTS: [f64; 5] = {
    const RAW: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    const SUM: f64 = RAW[0] + RAW[1] + RAW[2] + RAW[3] + RAW[4];
    [RAW[0] / SUM, RAW[1] / SUM, RAW[2] / SUM, RAW[3] / SUM, RAW[4] / SUM]
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the `1 − MS-SSIM` term in the combined phase.
    pub lambda: f64,
    /// One weight per scale, finest first. Used as the exponents of every
    /// per-scale factor; the length is the nominal scale count.
    pub scale_weights: Vec<f64>,
    pub k1: f64,
    pub k2: f64,
    pub window_size: usize,
    pub window_sigma: f64,
    /// Dynamic range of the pixel values (1 for unit-range data).
    pub data_range: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            scale_weights: MS_SSIM_WEIGHTS.to_vec(),
            k1: 0.01,
            k2: 0.03,
            window_size: 11,
            window_sigma: 1.5,
            data_range: 1.0,
        }
    }
}

impl LossConfig {
    pub fn num_scales(&self) -> usize {
        self.scale_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Construction(format!("loss config: {m}")));
        if self.scale_weights.is_empty() {
            return bad("at least one scale weight is required".into());
        }
        if self.scale_weights.iter().any(|&w| !(w > 0.0)) {
            return bad(format!("scale weights must be positive: {:?}", self.scale_weights));
        }
        let sum: f64 = self.scale_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("scale weights sum to {sum}, expected 1"));
        }
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return bad(format!("window size {} must be odd and ≥ 3", self.window_size));
        }
        if !(self.window_sigma > 0.0) || !(self.data_range > 0.0) {
            return bad("window sigma and data range must be positive".into());
        }
        if !(self.lambda >= 0.0) || !(self.k1 > 0.0) || !(self.k2 > 0.0) {
            return bad("lambda must be non-negative and k1, k2 positive".into());
        }
        Ok(())
    }

    /// Scale weights usable on an `height × width` input: the scale count is
    /// reduced until `min(h, w) ≥ window · 2^(M−1)` and the surviving weights
    /// are renormalised to sum to one.
    pub fn effective_weights(&self, height: usize, width: usize) -> Result<Vec<f64>> {
        let extent = height.min(width);
        let mut m = self.num_scales();
        while m > 0 && extent < self.window_size << (m - 1) {
            m -= 1;
        }
        if m == 0 {
            return Err(Error::Shape(format!(
                "{height}×{width} is smaller than the {} px SSIM window",
                self.window_size
            )));
        }
        let kept = &self.scale_weights[..m];
        let sum: f64 = kept.iter().sum();
        Ok(kept.iter().map(|w| w / sum).collect())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    pub fn window(&self) -> Result<GaussianWindow> {
        GaussianWindow::new(self.window_size, self.window_sigma)
    }
}

/// Peak signal-to-noise ratio in dB over all pixels and channels.
///
/// Returns `f64::INFINITY` when the images are identical.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "psnr: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let pairs = a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| (x as f64, y as f64));
    psnr_from_pairs(pairs, a.pixels().len(), peak)
}

/// [`psnr`] over raw `f64` samples.
pub fn psnr_samples(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "psnr: {} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    psnr_from_pairs(a.iter().copied().zip(b.iter().copied()), a.len(), peak)
}

fn psnr_from_pairs(pairs: impl Iterator<Item = (f64, f64)>, count: usize, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Contract(format!("psnr: peak {peak} must be positive")));
    }
    let mut sum = 0.0f64;
    for (x, y) in pairs {
        let d = x - y;
        sum += d * d;
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}
