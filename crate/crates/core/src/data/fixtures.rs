use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{build_manifest, DatasetManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::raster::{LineDrawing, LineProvenance, MuralSource, RawMural, MIN_MURAL_SIDE};

const PALETTE: [[u8; 3]; 8] = [
    [196, 150, 92],  // ochre
    [92, 148, 118],  // malachite
    [58, 86, 150],   // lapis
    [178, 64, 48],   // cinnabar
    [232, 222, 198], // lead white
    [120, 84, 60],   // umber
    [214, 180, 120], // sand
    [150, 170, 160], // faded green
];
const CONTOUR: [u8; 3] = [34, 26, 22];
const FIXTURE_SPLIT: (f64, f64) = (0.9, 0.1);

fn stream_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// One synthetic mural: flat color regions (a Voronoi partition overlaid with
/// ellipses) separated by one-pixel dark contours. The contour pixels are
/// exactly the returned line drawing.
pub fn fixture_mural(id: &str, size: usize, seed: u64) -> Result<(RawMural, LineDrawing)> {
    if size < MIN_MURAL_SIDE {
        return Err(Error::Parameter(format!("fixture size must be >= {MIN_MURAL_SIDE}, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sites = rng.random_range(3..=6);
    let sites: Vec<(f64, f64)> = (0..n_sites)
        .map(|_| (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64)))
        .collect();
    let n_ellipses = rng.random_range(1..=2);
    let ellipses: Vec<[f64; 5]> = (0..n_ellipses)
        .map(|_| {
            let s = size as f64;
            [
                rng.random_range(0.2 * s..0.8 * s),
                rng.random_range(0.2 * s..0.8 * s),
                rng.random_range(s / 10.0..s / 4.0),
                rng.random_range(s / 10.0..s / 4.0),
                rng.random_range(0.0..std::f64::consts::PI),
            ]
        })
        .collect();
    let n_labels = n_sites + n_ellipses;
    let colors: Vec<[u8; 3]> = (0..n_labels)
        .map(|_| {
            let base = PALETTE[rng.random_range(0..PALETTE.len())];
            base.map(|c| (c as i32 + rng.random_range(-16..=16)).clamp(0, 255) as u8)
        })
        .collect();

    let labels = Array2::from_shape_fn((size, size), |(y, x)| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        for (k, e) in ellipses.iter().enumerate().rev() {
            let (dy, dx) = (py - e[0], px - e[1]);
            let (s, c) = e[4].sin_cos();
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if (u / e[2]).powi(2) + (v / e[3]).powi(2) <= 1.0 {
                return n_sites + k;
            }
        }
        sites
            .iter()
            .enumerate()
            .map(|(k, &(sy, sx))| (k, (py - sy).powi(2) + (px - sx).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .unwrap_or(0)
    });

    let mut strokes = Array2::<f32>::zeros((size, size));
    let mut pixels = Array3::<u8>::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let l = labels[[y, x]];
            let edge = (x + 1 < size && labels[[y, x + 1]] != l) || (y + 1 < size && labels[[y + 1, x]] != l);
            let color = if edge { CONTOUR } else { colors[l] };
            if edge {
                strokes[[y, x]] = 1.0;
            }
            for c in 0..3 {
                pixels[[y, x, c]] = color[c];
            }
        }
    }
    let mural = RawMural::new(id, MuralSource::SyntheticFixture, pixels)?;
    Ok((mural, LineDrawing::new(strokes, LineProvenance::Extracted)))
}

/// Writes `n` fixtures under `root/images` and `root/lines` and a manifest
/// at `root/manifest.toml` with a 90/10 split.
pub fn make_fixture_set(root: &Path, n: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Parameter("fixture count must be >= 1".into()));
    }
    for i in 0..n {
        let id = format!("fixture_{i:04}");
        let (mural, line) = fixture_mural(&id, size, stream_seed(seed, i as u64))?;
        mural.save(&root.join("images").join(format!("{id}.png")))?;
        line.save(&root.join("lines").join(format!("{id}.png")))?;
    }
    let manifest = build_manifest(root, FIXTURE_SPLIT)?;
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_fixture_has_strokes_that_are_dark() {
        for seed in 0..20 {
            let (m, l) = fixture_mural("f", 64, seed).unwrap();
            assert!(l.stroke_count() > 0);
            for ((y, x), &s) in l.strokes.indexed_iter() {
                let dark = m.pixels()[[y, x, 0]] == CONTOUR[0] && m.pixels()[[y, x, 1]] == CONTOUR[1];
                assert_eq!(s == 1.0, dark, "seed {seed} at {y},{x}");
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(make_fixture_set(dir.path(), 0, 64, 1), Err(Error::Parameter(_))));
        assert!(matches!(make_fixture_set(dir.path(), 1, 32, 1), Err(Error::Parameter(_))));
    }
}
