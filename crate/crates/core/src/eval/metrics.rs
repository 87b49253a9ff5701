//! PSNR and SSIM on single-channel images stored row-major.

use crate::error::{MmtError, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `max − min` of an image.
pub fn data_range(img: &[f64]) -> f64 {
    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

fn same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.is_empty() {
        return Err(MmtError::shape(format!(
            "metric inputs must be nonempty and equal length, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// `10·log10(range² / MSE)`; identical images give `+∞`.
pub fn psnr(x: &[f64], y: &[f64], range: f64) -> Result<f64> {
    same_len(x, y)?;
    if !(range > 0.0 && range.is_finite()) {
        return Err(MmtError::invalid(format!("PSNR data range must be positive, got {range}")));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// PSNR with the data range taken from `reference`.
pub fn psnr_ref(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    psnr(estimate, reference, data_range(reference))
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filter of an `h × w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the positions where the 11×11 window fits. The dynamic
/// range comes from `reference`, so the metric is not symmetric.
pub fn ssim(estimate: &[f64], reference: &[f64], h: usize, w: usize) -> Result<f64> {
    same_len(estimate, reference)?;
    if estimate.len() != h * w {
        return Err(MmtError::shape(format!("{} pixels for a {h}x{w} image", estimate.len())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MmtError::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let range = data_range(reference);
    if !(range > 0.0 && range.is_finite()) {
        return Err(MmtError::invalid("SSIM reference has no dynamic range"));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y) = (estimate, reference);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let mxx = filter_valid(&xx, h, w, &k);
    let myy = filter_valid(&yy, h, w, &k);
    let mxy = filter_valid(&xy, h, w, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Decibels with two decimals, `inf` for identical images.
pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.2}")
    }
}
