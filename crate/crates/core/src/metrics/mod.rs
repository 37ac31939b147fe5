//! Image similarity, block-matching optical flow and temporal consistency.

mod eval;
mod flow;
mod report;

use crate::error::{bail_input, Result};
use crate::Image;

pub use eval::{evaluate, EvalConfig};
pub use flow::{optical_flow, FlowField, DEFAULT_LEVELS, DEFAULT_PATCH, SEARCH_RADIUS};
pub use report::{ConsistencyRow, MatrixCell, MetricsReport};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        bail_input!("image shapes differ: {}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height());
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for images with values in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over fully contained windows only.
fn filter_valid(x: &[f64], width: usize, height: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (width + 1 - n, height + 1 - n);
    let mut rows = vec![0.0; height * ow];
    for y in 0..height {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|i| k[i] * x[y * width + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        bail_input!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}");
    }
    let (x, y) = (a.luma(), b.luma());
    let k = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, my) = (filter_valid(&x, w, h, &k), filter_valid(&y, w, h, &k));
    let (sxx, syy, sxy) = (filter_valid(&xx, w, h, &k), filter_valid(&yy, w, h, &k), filter_valid(&xy, w, h, &k));
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = mx.len() as f64;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n)
}

/// Temporal consistency of `rendered` against `reference`: mean L1
/// difference of consecutive-frame flows, and mean absolute difference of
/// consecutive-frame SSIM (a structural stand-in for perceptual measures).
pub fn consistency(rendered: &[Image], reference: &[Image]) -> Result<(f64, f64)> {
    if rendered.len() != reference.len() || rendered.len() < 2 {
        bail_input!("consistency needs two sequences of equal length >= 2, got {} and {}", rendered.len(), reference.len());
    }
    for (y, x) in rendered.iter().zip(reference) {
        check_shapes(y, x)?;
    }
    let mut tof = 0.0;
    let mut tss = 0.0;
    for t in 0..rendered.len() - 1 {
        let fy = optical_flow(&rendered[t + 1], &rendered[t], DEFAULT_LEVELS, DEFAULT_PATCH)?;
        let fx = optical_flow(&reference[t + 1], &reference[t], DEFAULT_LEVELS, DEFAULT_PATCH)?;
        tof += fy.mean_l1_diff(&fx)?;
        tss += (ssim(&rendered[t + 1], &rendered[t])? - ssim(&reference[t + 1], &reference[t])?).abs();
    }
    let pairs = (rendered.len() - 1) as f64;
    Ok((tof / pairs, tss / pairs))
}
