use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_same(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("metric inputs differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared difference of two `[0, 1]` images of any layout.
pub fn mse(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_same(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(1/mse)`; `+∞` for identical images.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// ITU-R BT.601 luma of a `[3, H, W]` image.
pub fn luma(image: &Array3<f64>) -> Result<Array2<f64>> {
    if image.shape()[0] != 3 {
        return Err(Error::Shape(format!("luma expects [3, H, W], got {:?}", image.shape())));
    }
    let c = |i| image.index_axis(Axis(0), i);
    Ok(&c(0) * 0.299 + &c(1) * 0.587 + &c(2) * 0.114)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable "valid" filtering with `taps` along both axes.
fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = x.dim();
    let rows = Array2::from_shape_fn((h, w - k + 1), |(r, c)| (0..k).map(|i| taps[i] * x[[r, c + i]]).sum::<f64>());
    Array2::from_shape_fn((h - k + 1, w - k + 1), |(r, c)| (0..k).map(|i| taps[i] * rows[[r + i, c]]).sum::<f64>())
}

/// Mean SSIM over the valid region of two `[0, 1]` single-channel images.
pub fn ssim_gray(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("ssim inputs differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let aa = filter_valid(&(a * a), &taps);
    let bb = filter_valid(&(b * b), &taps);
    let ab = filter_valid(&(a * b), &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM on the luma of two `[3, H, W]` images in `[0, 1]`.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_same(a, b)?;
    ssim_gray(&luma(a)?, &luma(b)?)
}
