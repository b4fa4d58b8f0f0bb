use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::raster::{ImageTensor, LineDrawing, Mask};

/// Which augmentations to draw. The default is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Random crop to `(height, width)`.
    pub crop: Option<(usize, usize)>,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Rotate by a uniformly drawn multiple of 90°.
    pub rotate90: bool,
    /// Maximum relative per-channel brightness and contrast change.
    pub color_jitter: f64,
}

/// One applied transform, in application order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transform {
    Crop { top: usize, left: usize, height: usize, width: usize },
    HFlip,
    VFlip,
    /// `quarter_turns` clockwise rotations.
    Rot90 { quarter_turns: u8 },
    ColorJitter { brightness: [f32; 3], contrast: [f32; 3] },
}

impl Transform {
    pub fn is_geometric(&self) -> bool {
        !matches!(self, Transform::ColorJitter { .. })
    }
}

fn geometric<T: Clone + Default>(t: &Transform, grid: &Array2<T>) -> Array2<T> {
    match *t {
        Transform::Crop { top, left, height, width } => grid.slice(s![top..top + height, left..left + width]).to_owned(),
        Transform::HFlip => grid.slice(s![.., ..;-1]).to_owned(),
        Transform::VFlip => grid.slice(s![..;-1, ..]).to_owned(),
        Transform::Rot90 { quarter_turns } => {
            let mut out = grid.clone();
            for _ in 0..quarter_turns % 4 {
                let (ih, _) = out.dim();
                // clockwise: out[r][c] = in[H-1-c][r]
                out = Array2::from_shape_fn((out.dim().1, ih), |(r, c)| out[[ih - 1 - c, r]].clone());
            }
            out
        }
        Transform::ColorJitter { .. } => grid.clone(),
    }
}

/// Replays the geometric part of a record on a single-channel grid.
pub fn apply_geometric<T: Clone + Default>(record: &[Transform], grid: &Array2<T>) -> Array2<T> {
    record
        .iter()
        .filter(|t| t.is_geometric())
        .fold(grid.clone(), |g, t| geometric(t, &g))
}

fn apply_image(t: &Transform, image: &Array3<f32>) -> Array3<f32> {
    match t {
        Transform::ColorJitter { brightness, contrast } => {
            let mut out = image.clone();
            for (c, mut ch) in out.axis_iter_mut(Axis(0)).enumerate() {
                // work in [0,1]; contrast about the channel mean, then brightness gain
                let mean = ch.iter().map(|&v| (v + 1.0) * 0.5).sum::<f32>() / ch.len().max(1) as f32;
                ch.mapv_inplace(|v| {
                    let u = (v + 1.0) * 0.5;
                    let u = (brightness[c] * (mean + contrast[c] * (u - mean))).clamp(0.0, 1.0);
                    u * 2.0 - 1.0
                });
            }
            out
        }
        geo => {
            let planes: Vec<Array2<f32>> = image.outer_iter().map(|p| geometric(geo, &p.to_owned())).collect();
            let (h, w) = planes[0].dim();
            let mut out = Array3::zeros((planes.len(), h, w));
            for (i, p) in planes.iter().enumerate() {
                out.index_axis_mut(Axis(0), i).assign(p);
            }
            out
        }
    }
}

/// Draws and applies augmentations. The same geometric transform hits
/// image, line and mask; color jitter touches the image only.
pub fn augment(sample: &Sample, cfg: &AugmentationConfig, rng_seed: u64) -> Result<Sample> {
    let (h, w) = sample.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut ops = Vec::new();
    if let Some((ch, cw)) = cfg.crop {
        if ch > h || cw > w || ch == 0 || cw == 0 {
            return Err(Error::Parameter(format!("crop {ch}x{cw} does not fit a {h}x{w} sample")));
        }
        ops.push(Transform::Crop {
            top: rng.random_range(0..=h - ch),
            left: rng.random_range(0..=w - cw),
            height: ch,
            width: cw,
        });
    }
    if cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob.min(1.0)) {
        ops.push(Transform::HFlip);
    }
    if cfg.vflip_prob > 0.0 && rng.random_bool(cfg.vflip_prob.min(1.0)) {
        ops.push(Transform::VFlip);
    }
    if cfg.rotate90 {
        let k = rng.random_range(0..4u8);
        if k > 0 {
            ops.push(Transform::Rot90 { quarter_turns: k });
        }
    }
    if cfg.color_jitter > 0.0 {
        let j = cfg.color_jitter as f32;
        let mut draw = || std::array::from_fn(|_| 1.0 + rng.random_range(-j..=j));
        let brightness = draw();
        let contrast = draw();
        ops.push(Transform::ColorJitter { brightness, contrast });
    }
    apply_record(sample, &ops)
}

/// Applies an explicit transform list.
pub fn apply_record(sample: &Sample, ops: &[Transform]) -> Result<Sample> {
    let mut image = sample.image.0.clone();
    for t in ops {
        image = apply_image(t, &image);
    }
    let strokes = apply_geometric(ops, &sample.line.strokes);
    let hole = apply_geometric(ops, &sample.mask.hole);
    let mut record = sample.augmentation_record.clone();
    record.extend_from_slice(ops);
    Ok(Sample {
        id: sample.id.clone(),
        image: ImageTensor::new(image)?,
        line: LineDrawing::new(strokes, sample.line.provenance),
        mask: Mask::new(hole),
        augmentation_record: record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Sample {
        let img = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| ((c * 64 + y * 8 + x) as f32 / 192.0) - 1.0);
        let mut strokes = Array2::zeros((8, 8));
        strokes.row_mut(2).fill(1.0);
        let hole = Array2::from_shape_fn((8, 8), |(y, x)| if y < 3 && x < 4 { 1.0 } else { 0.0 });
        Sample::new(
            "toy",
            ImageTensor(img),
            LineDrawing::new(strokes, crate::raster::LineProvenance::Extracted),
            Mask::new(hole),
        )
        .unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let s = toy();
        let out = augment(&s, &AugmentationConfig::default(), 7).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn crop_must_fit() {
        let cfg = AugmentationConfig {
            crop: Some((9, 4)),
            ..Default::default()
        };
        assert!(matches!(augment(&toy(), &cfg, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn hflip_twice_restores() {
        let cfg = AugmentationConfig {
            hflip_prob: 1.0,
            ..Default::default()
        };
        let s = toy();
        let once = augment(&s, &cfg, 3).unwrap();
        assert_ne!(once.image, s.image);
        let twice = augment(&once, &cfg, 3).unwrap();
        assert_eq!(twice.image, s.image);
        assert_eq!(twice.line, s.line);
        assert_eq!(twice.mask, s.mask);
    }

    #[test]
    fn quarter_turn_moves_row_stroke_to_column() {
        let s = toy();
        let out = apply_record(&s, &[Transform::Rot90 { quarter_turns: 1 }]).unwrap();
        // independent remap: a full row r becomes column H-1-r under a clockwise turn
        for y in 0..8 {
            for x in 0..8 {
                let expect = if x == 8 - 1 - 2 { 1.0 } else { 0.0 };
                assert_eq!(out.line.strokes[[y, x]], expect);
            }
        }
        assert_eq!(out.mask.hole_count(), s.mask.hole_count());
    }

    #[test]
    fn jitter_leaves_line_and_mask_alone() {
        let cfg = AugmentationConfig {
            color_jitter: 0.1,
            ..Default::default()
        };
        let s = toy();
        let out = augment(&s, &cfg, 11).unwrap();
        assert_eq!(out.line, s.line);
        assert_eq!(out.mask, s.mask);
        assert_ne!(out.image, s.image);
        assert_eq!(out.augmentation_record.len(), 1);
    }
}
