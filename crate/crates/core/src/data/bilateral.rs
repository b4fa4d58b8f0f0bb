use ndarray::Array3;

use crate::error::{Error, Result};
use crate::raster::RawMural;

/// Edge-preserving smoothing of an 8-bit mural.
///
/// `range_sigma` is in normalized intensity units (`[0, 1]`); the range
/// kernel uses the Euclidean RGB distance so all channels share one weight.
/// `f64::INFINITY` disables the range term, leaving a Gaussian blur.
pub fn bilateral_filter(image: &RawMural, spatial_sigma: f64, range_sigma: f64) -> Result<RawMural> {
    let out = bilateral_filter_unit(&image.to_unit(), spatial_sigma, range_sigma)?;
    Ok(RawMural::from_unit(image.id.clone(), image.source, &out))
}

/// The same filter on an `[H, W, C]` array in `[0, 1]`.
pub fn bilateral_filter_unit(image: &Array3<f64>, spatial_sigma: f64, range_sigma: f64) -> Result<Array3<f64>> {
    if !(spatial_sigma > 0.0) || !(range_sigma > 0.0) {
        return Err(Error::Parameter(format!(
            "bilateral sigmas must be positive (spatial {spatial_sigma}, range {range_sigma})"
        )));
    }
    let (h, w, c) = image.dim();
    let radius = (3.0 * spatial_sigma).ceil() as isize;
    let side = (2 * radius + 1) as usize;
    let mut spatial = vec![0.0; side * side];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let d2 = (dy * dy + dx * dx) as f64;
            spatial[((dy + radius) as usize) * side + (dx + radius) as usize] =
                (-d2 / (2.0 * spatial_sigma * spatial_sigma)).exp();
        }
    }
    let range_coef = if range_sigma.is_finite() {
        1.0 / (2.0 * range_sigma * range_sigma)
    } else {
        0.0
    };
    let src = image.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = Array3::<f64>::zeros((h, w, c));
    let mut acc = vec![0.0; c];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let center = &src[((y as usize) * w + x as usize) * c..][..c];
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut norm = 0.0;
            for dy in -radius..=radius {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -radius..=radius {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let px = &src[((yy as usize) * w + xx as usize) * c..][..c];
                    let mut weight = spatial[((dy + radius) as usize) * side + (dx + radius) as usize];
                    if range_coef > 0.0 {
                        let d2: f64 = px.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                        weight *= (-d2 * range_coef).exp();
                    }
                    norm += weight;
                    for (a, v) in acc.iter_mut().zip(px) {
                        *a += weight * v;
                    }
                }
            }
            for ch in 0..c {
                out[[y as usize, x as usize, ch]] = acc[ch] / norm;
            }
        }
    }
    Ok(out)
}
