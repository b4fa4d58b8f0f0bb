use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{Mask, RatioBin};

/// Irregular hole masks grouped by hole-ratio bin.
#[derive(Debug, Clone, Default)]
pub struct MaskLibrary {
    bins: BTreeMap<RatioBin, Vec<Mask>>,
}

impl MaskLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a mask under its own bin; masks outside every bin are dropped.
    pub fn insert(&mut self, mask: Mask) -> bool {
        match mask.ratio_bin {
            Some(bin) if !mask.is_empty() => {
                self.bins.entry(bin).or_default().push(mask);
                true
            }
            _ => false,
        }
    }

    pub fn bin(&self, bin: RatioBin) -> &[Mask] {
        self.bins.get(&bin).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.bins.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `per_bin` procedural masks of size `h`×`w` for each of the given bins.
    pub fn procedural(h: usize, w: usize, bins: &[RatioBin], per_bin: usize, seed: u64) -> Result<Self> {
        let mut lib = MaskLibrary::new();
        for &bin in bins {
            for i in 0..per_bin {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((bin.percent() as u64) << 32) ^ i as u64);
                lib.insert(generate_mask(h, w, bin, &mut rng)?);
            }
        }
        Ok(lib)
    }

    /// Loads every PNG in `dir` (255 = missing), resized by nearest
    /// neighbour to `h`×`w`, and files it by its post-resize hole ratio.
    pub fn load_dir(dir: &Path, h: usize, w: usize) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let mut lib = MaskLibrary::new();
        for p in paths {
            let m = Mask::load(&p)?;
            let (mh, mw) = m.dims();
            let resized = Array2::from_shape_fn((h, w), |(y, x)| m.hole[[y * mh / h, x * mw / w]]);
            if !lib.insert(Mask::new(resized)) {
                log::debug!("{}: hole ratio outside every bin, skipped", p.display());
            }
        }
        Ok(lib)
    }
}

/// Deterministically picks a mask from `bin`.
pub fn sample_mask(library: &MaskLibrary, bin: RatioBin, rng_seed: u64) -> Result<Mask> {
    let masks = library.bin(bin);
    if masks.is_empty() {
        return Err(Error::Resource(format!("mask library has no masks in the {bin} bin")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(masks[rng.random_range(0..masks.len())].clone())
}

/// Free-form brush-stroke mask whose hole fraction lands in `bin`.
///
/// Discs are stamped along random walks until the fraction reaches the bin's
/// lower bound. A single disc covers well under a tenth of the frame, so the
/// last stamp can never push the fraction past the upper bound.
pub fn generate_mask<R: Rng + ?Sized>(h: usize, w: usize, bin: RatioBin, rng: &mut R) -> Result<Mask> {
    if h < 8 || w < 8 {
        return Err(Error::Parameter(format!("mask must be at least 8x8, got {h}x{w}")));
    }
    let (low, _) = bin.bounds();
    let target = (low * (h * w) as f64).ceil() as usize;
    let max_radius = (h.min(w) / 16).max(1) as i64;
    let mut hole = Array2::<f32>::zeros((h, w));
    let mut count = 0usize;
    while count < target {
        let mut y = rng.random_range(0..h) as f64;
        let mut x = rng.random_range(0..w) as f64;
        let radius = rng.random_range(1..=max_radius) as isize;
        let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
        let steps = rng.random_range(4..24);
        for _ in 0..steps {
            count += stamp_disc(&mut hole, y.round() as isize, x.round() as isize, radius);
            if count >= target {
                break;
            }
            angle += rng.random_range(-0.6..0.6);
            y = (y + angle.sin() * radius as f64).clamp(0.0, (h - 1) as f64);
            x = (x + angle.cos() * radius as f64).clamp(0.0, (w - 1) as f64);
        }
    }
    Ok(Mask::new(hole))
}

fn stamp_disc(hole: &mut Array2<f32>, cy: isize, cx: isize, r: isize) -> usize {
    let (h, w) = hole.dim();
    let mut added = 0;
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx > r * r {
                continue;
            }
            let (y, x) = (cy + dy, cx + dx);
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            let v = &mut hole[[y as usize, x as usize]];
            if *v == 0.0 {
                *v = 1.0;
                added += 1;
            }
        }
    }
    added
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_bin_is_a_resource_error() {
        let lib = MaskLibrary::procedural(32, 32, &[RatioBin::P10], 2, 0).unwrap();
        assert!(matches!(sample_mask(&lib, RatioBin::P40, 1), Err(Error::Resource(_))));
    }

    #[test]
    fn same_seed_same_mask() {
        let lib = MaskLibrary::procedural(64, 64, &RatioBin::ALL, 6, 9).unwrap();
        for bin in RatioBin::ALL {
            assert_eq!(sample_mask(&lib, bin, 42).unwrap(), sample_mask(&lib, bin, 42).unwrap());
        }
    }

    #[test]
    fn all_zero_masks_are_not_filed() {
        let mut lib = MaskLibrary::new();
        assert!(!lib.insert(Mask::empty(16, 16)));
        assert!(lib.is_empty());
    }
}
