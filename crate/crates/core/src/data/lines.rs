use std::path::PathBuf;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::raster::{gray_to_array, LineDrawing, LineProvenance, RawMural};

/// Anything that maps a mural to a per-pixel edge response in `[0, 1]`.
///
/// Learned detectors run out of process; their output maps can be fed in
/// through [`ResponseFileExtractor`].
pub trait EdgeExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn response(&self, image: &RawMural) -> Result<Array2<f64>>;
}

/// Sobel gradient magnitude on luma followed by non-maximum suppression,
/// normalized by the maximum response.
#[derive(Debug, Clone, Copy, Default)]
pub struct SobelNms;

impl SobelNms {
    fn luma(image: &RawMural) -> Array2<f64> {
        let unit = image.to_unit();
        let (h, w, _) = unit.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * unit[[y, x, 0]] + 0.587 * unit[[y, x, 1]] + 0.114 * unit[[y, x, 2]]
        })
    }
}

impl EdgeExtractor for SobelNms {
    fn name(&self) -> &str {
        "sobel-nms"
    }

    fn response(&self, image: &RawMural) -> Result<Array2<f64>> {
        let l = Self::luma(image);
        let (h, w) = l.dim();
        let at = |y: isize, x: isize| l[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
        let mut gx = Array2::<f64>::zeros((h, w));
        let mut gy = Array2::<f64>::zeros((h, w));
        for y in 0..h as isize {
            for x in 0..w as isize {
                gx[[y as usize, x as usize]] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                    - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
                gy[[y as usize, x as usize]] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                    - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            }
        }
        let mag = Array2::from_shape_fn((h, w), |(y, x)| gx[[y, x]].hypot(gy[[y, x]]));
        let mag_at = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                mag[[y as usize, x as usize]]
            }
        };
        let mut out = Array2::<f64>::zeros((h, w));
        for y in 0..h as isize {
            for x in 0..w as isize {
                let m = mag[[y as usize, x as usize]];
                if m <= 1e-12 {
                    continue;
                }
                let (dy, dx) = gradient_step(gy[[y as usize, x as usize]], gx[[y as usize, x as usize]]);
                // strict on one side, non-strict on the other, so plateaus two
                // pixels wide keep exactly one pixel
                if m > mag_at(y - dy, x - dx) && m >= mag_at(y + dy, x + dx) {
                    out[[y as usize, x as usize]] = m;
                }
            }
        }
        let max = out.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            out.mapv_inplace(|v| v / max);
        }
        Ok(out)
    }
}

/// Quantize the gradient direction to one of four neighbor offsets `(dy, dx)`.
fn gradient_step(gy: f64, gx: f64) -> (isize, isize) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (0, 1)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (1, 0)
    } else {
        (1, -1)
    }
}

/// Reads precomputed responses from `<dir>/<image id>.png` (white = edge).
#[derive(Debug, Clone)]
pub struct ResponseFileExtractor {
    pub dir: PathBuf,
}

impl EdgeExtractor for ResponseFileExtractor {
    fn name(&self) -> &str {
        "response-file"
    }

    fn response(&self, image: &RawMural) -> Result<Array2<f64>> {
        let path = self.dir.join(format!("{}.png", image.id));
        let img = image::open(&path)
            .map_err(|e| Error::Extraction(format!("{}: {e}", path.display())))?
            .to_luma8();
        let resp = gray_to_array(&img).mapv(|v| v as f64 / 255.0);
        if resp.dim() != (image.height(), image.width()) {
            return Err(Error::Extraction(format!(
                "{}: response is {:?}, image is {}x{}",
                path.display(),
                resp.dim(),
                image.height(),
                image.width()
            )));
        }
        Ok(resp)
    }
}

/// Strokes are pixels whose response strictly exceeds `threshold`.
pub fn binarize(response: &Array2<f64>, threshold: f64) -> Array2<f32> {
    response.mapv(|v| if v > threshold { 1.0 } else { 0.0 })
}

pub fn extract_lines(image: &RawMural, extractor: &dyn EdgeExtractor, threshold: f64) -> Result<LineDrawing> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Parameter(format!("line threshold must be in (0, 1], got {threshold}")));
    }
    let response = extractor.response(image).map_err(|e| match e {
        Error::Extraction(_) => e,
        other => Error::Extraction(format!("{}: {other}", extractor.name())),
    })?;
    Ok(LineDrawing::new(binarize(&response, threshold), LineProvenance::Extracted))
}
