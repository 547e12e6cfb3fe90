//! Image quality metrics on `[0, 1]` images.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("image {0:?} is smaller than the {1}x{1} window")]
    TooSmall((usize, usize), usize),
    #[error("mask length {0} does not match {1} pixels")]
    MaskMismatch(usize, usize),
    #[error("mask selects no pixels")]
    EmptyMask,
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    /// Which pixels were evaluated, e.g. "all" or "visible texels".
    pub evaluated_on: String,
}

fn check(a: &Image, b: &Image) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::ShapeMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * libm::log10(max_value * max_value / mse)
    }
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image, max_value: f64) -> Result<f64, MetricError> {
    check(a, b)?;
    let n = a.data().len();
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(psnr_from_mse(sum / n as f64, max_value))
}

/// PSNR over the pixels where `mask` is true (all three channels).
pub fn psnr_masked(a: &Image, b: &Image, mask: &[bool], max_value: f64) -> Result<f64, MetricError> {
    check(a, b)?;
    let pixels = a.width() * a.height();
    if mask.len() != pixels {
        return Err(MetricError::MaskMismatch(mask.len(), pixels));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..3 {
            let d = a.data()[3 * i + c] - b.data()[3 * i + c];
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(MetricError::EmptyMask);
    }
    Ok(psnr_from_mse(sum / count as f64, max_value))
}

/// Normalised 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| libm::exp(-(i as f64 - c) * (i as f64 - c) / (2.0 * sigma * sigma))).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, `L = 1`, over all window positions
/// fully inside the image, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check(a, b)?;
    let (w, h) = a.dims();
    let k = SSIM_WINDOW;
    if w < k || h < k {
        return Err(MetricError::TooSmall(a.dims(), k));
    }
    let taps = gaussian_taps(k, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut total = 0.0;
    for ch in 0..3 {
        let at = |img: &Image, x: usize, y: usize| img.data()[3 * (y * w + x) + ch];
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = taps[dx] * taps[dy];
                        let x = at(a, ox + dx, oy + dy);
                        let y = at(b, ox + dx, oy + dy);
                        ma += wt * x;
                        mb += wt * y;
                        aa += wt * x * x;
                        bb += wt * y * y;
                        ab += wt * x * y;
                    }
                }
                let va = aa - ma * ma;
                let vb = bb - mb * mb;
                let cov = ab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (3 * ow * oh) as f64)
}

pub fn report(a: &Image, b: &Image, evaluated_on: &str) -> Result<MetricReport, MetricError> {
    Ok(MetricReport { psnr: psnr(a, b, 1.0)?, ssim: ssim(a, b)?, evaluated_on: evaluated_on.into() })
}
