//! Image, mask and line-drawing types plus their file conventions.
//!
//! On disk: images are 8-bit RGB, line drawings are 8-bit grayscale with
//! 0 = stroke and 255 = background, masks are 8-bit grayscale with
//! 255 = missing. In memory lines and masks are `1.0` where the stroke or
//! hole is, and images live in `[-1, 1]`, channel-major.

use std::fmt;
use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a mural image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuralSource {
    Real,
    Replica,
    SyntheticFixture,
}

/// An 8-bit RGB mural, `[H, W, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMural {
    pub id: String,
    pub source: MuralSource,
    pixels: Array3<u8>,
}

pub const MIN_MURAL_SIDE: usize = 64;

impl RawMural {
    pub fn new(id: impl Into<String>, source: MuralSource, pixels: Array3<u8>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::Shape(format!("mural must have 3 channels, got {c}")));
        }
        if h < MIN_MURAL_SIDE || w < MIN_MURAL_SIDE {
            return Err(Error::Shape(format!(
                "mural must be at least {MIN_MURAL_SIDE}x{MIN_MURAL_SIDE}, got {h}x{w}"
            )));
        }
        Ok(RawMural {
            id: id.into(),
            source,
            pixels,
        })
    }

    /// Same as [`RawMural::new`] without the minimum-size check; for small
    /// test rasters and intermediate results.
    pub fn from_pixels_unchecked(id: impl Into<String>, source: MuralSource, pixels: Array3<u8>) -> Self {
        RawMural {
            id: id.into(),
            source,
            pixels,
        }
    }

    pub fn pixels(&self) -> &Array3<u8> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Pixels scaled to `[0, 1]`, `[H, W, 3]`.
    pub fn to_unit(&self) -> Array3<f64> {
        self.pixels.mapv(|v| v as f64 / 255.0)
    }

    pub fn from_unit(id: impl Into<String>, source: MuralSource, unit: &Array3<f64>) -> Self {
        RawMural {
            id: id.into(),
            source,
            pixels: unit.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        }
    }

    pub fn to_tensor(&self) -> ImageTensor {
        let chw = self.pixels.view().permuted_axes([2, 0, 1]).mapv(|v| v as f32 / 127.5 - 1.0);
        ImageTensor(chw)
    }

    pub fn load(path: &Path, source: MuralSource) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(RawMural::from_pixels_unchecked(id, source, rgb_to_array(&img)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_rgb(&self.pixels, path)
    }
}

/// RGB image in `[-1, 1]`, channel-major `[3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(pub Array3<f32>);

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::Shape(format!("image tensor needs 3 channels, got {}", data.dim().0)));
        }
        Ok(ImageTensor(data))
    }

    pub fn filled(h: usize, w: usize, value: f32) -> Self {
        ImageTensor(Array3::from_elem((3, h, w), value))
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.0
    }

    /// Values remapped to `[0, 1]` for metrics.
    pub fn to_unit(&self) -> Array3<f64> {
        self.0.mapv(|v| ((v as f64 + 1.0) / 2.0).clamp(0.0, 1.0))
    }

    /// 8-bit `[H, W, 3]` with rounding.
    pub fn to_u8(&self) -> Array3<u8> {
        self.0
            .view()
            .permuted_axes([1, 2, 0])
            .mapv(|v| (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8)
    }

    pub fn from_u8(pixels: &Array3<u8>) -> Self {
        ImageTensor(pixels.view().permuted_axes([2, 0, 1]).mapv(|v| v as f32 / 127.5 - 1.0))
    }

    /// `image ⊙ (1 − mask)`: holes set to zero.
    pub fn masked(&self, mask: &Mask) -> Result<ImageTensor> {
        check_dims("masked image", self.dims(), mask.dims())?;
        let mut out = self.0.clone();
        for mut ch in out.outer_iter_mut() {
            ndarray::Zip::from(&mut ch)
                .and(&mask.hole)
                .for_each(|v, &m| *v *= 1.0 - m);
        }
        Ok(ImageTensor(out))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(RawMural::load(path, MuralSource::Real)?.to_tensor())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_rgb(&self.to_u8(), path)
    }
}

/// Hole-area bucket used to stratify masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum RatioBin {
    P10,
    P20,
    P30,
    P40,
    P50,
}

impl RatioBin {
    pub const ALL: [RatioBin; 5] = [RatioBin::P10, RatioBin::P20, RatioBin::P30, RatioBin::P40, RatioBin::P50];

    pub fn percent(self) -> u32 {
        match self {
            RatioBin::P10 => 10,
            RatioBin::P20 => 20,
            RatioBin::P30 => 30,
            RatioBin::P40 => 40,
            RatioBin::P50 => 50,
        }
    }

    pub fn from_percent(p: u32) -> Option<Self> {
        RatioBin::ALL.into_iter().find(|b| b.percent() == p)
    }

    /// Half-open `[low, high)` hole fraction.
    pub fn bounds(self) -> (f64, f64) {
        let low = self.percent() as f64 / 100.0;
        (low, low + 0.1)
    }

    pub fn contains(self, fraction: f64) -> bool {
        let (lo, hi) = self.bounds();
        fraction >= lo && fraction < hi
    }

    pub fn for_fraction(fraction: f64) -> Option<Self> {
        RatioBin::ALL.into_iter().find(|b| b.contains(fraction))
    }
}

impl TryFrom<u32> for RatioBin {
    type Error = String;
    fn try_from(p: u32) -> std::result::Result<Self, String> {
        RatioBin::from_percent(p).ok_or_else(|| format!("ratio bin must be one of 10,20,30,40,50; got {p}"))
    }
}

impl From<RatioBin> for u32 {
    fn from(b: RatioBin) -> u32 {
        b.percent()
    }
}

impl fmt::Display for RatioBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.percent())
    }
}

/// Binary hole map, `1.0` = missing.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub hole: Array2<f32>,
    pub ratio_bin: Option<RatioBin>,
}

impl Mask {
    /// Binarizes at 0.5 and assigns the matching ratio bin, if any.
    pub fn new(hole: Array2<f32>) -> Self {
        let hole = hole.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let ratio_bin = RatioBin::for_fraction(hole_fraction(&hole));
        Mask { hole, ratio_bin }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Mask::new(Array2::zeros((h, w)))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.hole.dim()
    }

    pub fn hole_fraction(&self) -> f64 {
        hole_fraction(&self.hole)
    }

    pub fn hole_count(&self) -> usize {
        self.hole.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn is_empty(&self) -> bool {
        self.hole_count() == 0
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = open_gray(path)?;
        Ok(Mask::new(gray_to_array(&img).mapv(|v| if v > 127 { 1.0 } else { 0.0 })))
    }

    pub fn to_gray(&self) -> Array2<u8> {
        self.hole.mapv(|v| if v >= 0.5 { 255 } else { 0 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_gray(&self.to_gray(), path)
    }
}

fn hole_fraction(hole: &Array2<f32>) -> f64 {
    if hole.is_empty() {
        return 0.0;
    }
    hole.iter().filter(|&&v| v >= 0.5).count() as f64 / hole.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineProvenance {
    Extracted,
    Manual,
    ManualCompleted,
}

/// Binary structure map, `1.0` = stroke.
#[derive(Debug, Clone, PartialEq)]
pub struct LineDrawing {
    pub strokes: Array2<f32>,
    pub provenance: LineProvenance,
}

impl LineDrawing {
    pub fn new(strokes: Array2<f32>, provenance: LineProvenance) -> Self {
        LineDrawing {
            strokes: strokes.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
            provenance,
        }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        LineDrawing::new(Array2::zeros((h, w)), LineProvenance::Extracted)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.strokes.dim()
    }

    pub fn stroke_count(&self) -> usize {
        self.strokes.iter().filter(|&&v| v >= 0.5).count()
    }

    /// Loads the on-disk convention (dark strokes on white) and inverts it.
    pub fn load(path: &Path, provenance: LineProvenance) -> Result<Self> {
        let img = open_gray(path)?;
        Ok(LineDrawing::new(
            gray_to_array(&img).mapv(|v| if v < 128 { 1.0 } else { 0.0 }),
            provenance,
        ))
    }

    pub fn to_gray(&self) -> Array2<u8> {
        self.strokes.mapv(|v| if v >= 0.5 { 0 } else { 255 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_gray(&self.to_gray(), path)
    }
}

pub(crate) fn check_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

// ---- batching -----------------------------------------------------------

/// Stack images into `[N, 3, H, W]`.
pub fn stack_images(images: &[&ImageTensor]) -> Result<ArrayD<f32>> {
    let first = images.first().ok_or_else(|| Error::Parameter("empty batch".into()))?;
    let (h, w) = first.dims();
    let mut out = Array4::<f32>::zeros((images.len(), 3, h, w));
    for (i, img) in images.iter().enumerate() {
        check_dims("batch", (h, w), img.dims())?;
        out.index_axis_mut(Axis(0), i).assign(&img.0);
    }
    Ok(out.into_dyn())
}

/// Stack single-channel maps into `[N, 1, H, W]`.
pub fn stack_planes(planes: &[&Array2<f32>]) -> Result<ArrayD<f32>> {
    let first = planes.first().ok_or_else(|| Error::Parameter("empty batch".into()))?;
    let (h, w) = first.dim();
    let mut out = Array4::<f32>::zeros((planes.len(), 1, h, w));
    for (i, p) in planes.iter().enumerate() {
        check_dims("batch", (h, w), p.dim())?;
        out.slice_mut(s![i, 0, .., ..]).assign(p);
    }
    Ok(out.into_dyn())
}

/// Split `[N, 3, H, W]` back into images.
pub fn unstack_images(batch: &ArrayD<f32>) -> Result<Vec<ImageTensor>> {
    let b = batch
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::Shape(format!("expected [N,3,H,W], got {:?}", batch.shape())))?;
    b.outer_iter().map(|img| ImageTensor::new(img.to_owned())).collect()
}

// ---- padding ----------------------------------------------------------------

/// Smallest multiple of `multiple` that is at least `n`.
pub fn padded_len(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Reflects `i` into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Mirror-pads an `[H, W, C]` raster on the bottom and right to `h × w`.
pub fn mirror_pad3<T: Copy>(a: &Array3<T>, h: usize, w: usize) -> Array3<T> {
    let (ih, iw, c) = a.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, k)| a[[reflect(y, ih), reflect(x, iw), k]])
}

/// Mirror-pads a single-channel map on the bottom and right to `h × w`.
pub fn mirror_pad2<T: Copy>(a: &Array2<T>, h: usize, w: usize) -> Array2<T> {
    let (ih, iw) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| a[[reflect(y, ih), reflect(x, iw)]])
}

// ---- file helpers ---------------------------------------------------------

fn open_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

pub(crate) fn rgb_to_array(img: &RgbImage) -> Array3<u8> {
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.as_raw().clone()).expect("rgb buffer")
}

pub(crate) fn gray_to_array(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.as_raw().clone()).expect("gray buffer")
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn encode_rgb_png(pixels: &Array3<u8>) -> Result<Vec<u8>> {
    let (h, w, _) = pixels.dim();
    let img = RgbImage::from_raw(w as u32, h as u32, pixels.as_standard_layout().iter().copied().collect())
        .ok_or_else(|| Error::Shape("rgb buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
    Ok(out.into_inner())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<Array3<u8>> {
    let img = image::load_from_memory(bytes).map_err(|source| Error::Image {
        path: "<memory>".into(),
        source,
    })?;
    Ok(rgb_to_array(&img.to_rgb8()))
}

pub fn decode_gray(bytes: &[u8]) -> Result<Array2<u8>> {
    let img = image::load_from_memory(bytes).map_err(|source| Error::Image {
        path: "<memory>".into(),
        source,
    })?;
    Ok(gray_to_array(&img.to_luma8()))
}

pub fn encode_gray_png(pixels: &Array2<u8>) -> Result<Vec<u8>> {
    let (h, w) = pixels.dim();
    let img = GrayImage::from_raw(w as u32, h as u32, pixels.as_standard_layout().iter().copied().collect())
        .ok_or_else(|| Error::Shape("gray buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
    Ok(out.into_inner())
}

pub(crate) fn save_rgb(pixels: &Array3<u8>, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let bytes = encode_rgb_png(pixels)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn save_gray(pixels: &Array2<u8>, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let bytes = encode_gray_png(pixels)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_bins_are_half_open() {
        assert_eq!(RatioBin::for_fraction(0.1), Some(RatioBin::P10));
        assert_eq!(RatioBin::for_fraction(0.1999), Some(RatioBin::P10));
        assert_eq!(RatioBin::for_fraction(0.2), Some(RatioBin::P20));
        assert_eq!(RatioBin::for_fraction(0.6), None);
        assert_eq!(RatioBin::for_fraction(0.05), None);
    }

    #[test]
    fn file_conventions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut strokes = Array2::zeros((8, 8));
        strokes[[2, 3]] = 1.0;
        let line = LineDrawing::new(strokes.clone(), LineProvenance::Manual);
        let lp = dir.path().join("line.png");
        line.save(&lp).unwrap();
        let gray = open_gray(&lp).unwrap();
        assert_eq!(gray.get_pixel(3, 2)[0], 0);
        assert_eq!(gray.get_pixel(0, 0)[0], 255);
        assert_eq!(LineDrawing::load(&lp, LineProvenance::Manual).unwrap(), line);

        let mask = Mask::new(strokes);
        let mp = dir.path().join("mask.png");
        mask.save(&mp).unwrap();
        assert_eq!(open_gray(&mp).unwrap().get_pixel(3, 2)[0], 255);
        assert_eq!(Mask::load(&mp).unwrap(), mask);
    }

    #[test]
    fn u8_tensor_round_trip_is_exact() {
        let px = Array3::from_shape_fn((4, 5, 3), |(i, j, c)| ((i * 53 + j * 17 + c * 91) % 256) as u8);
        assert_eq!(ImageTensor::from_u8(&px).to_u8(), px);
    }

    #[test]
    fn rejects_small_murals() {
        let px = Array3::zeros((32, 80, 3));
        assert!(matches!(RawMural::new("x", MuralSource::Real, px), Err(Error::Shape(_))));
    }

    #[test]
    fn mirror_padding_reflects_without_repeating_edges() {
        assert_eq!((padded_len(61, 8), padded_len(64, 8), padded_len(1, 8)), (64, 64, 8));
        let a = Array2::from_shape_fn((3, 4), |(y, x)| (y * 10 + x) as u8);
        let p = mirror_pad2(&a, 8, 8);
        assert_eq!(p.slice(s![..3, ..4]), a);
        assert_eq!(p.row(0).to_vec(), vec![0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(p.column(0).to_vec(), vec![0, 10, 20, 10, 0, 10, 20, 10]);
        let one = Array2::from_elem((1, 1), 7u8);
        assert!(mirror_pad2(&one, 8, 8).iter().all(|&v| v == 7));
        let rgb = Array3::from_shape_fn((3, 4, 3), |(y, x, c)| (y * 10 + x + 100 * c) as u8);
        let p3 = mirror_pad3(&rgb, 8, 8);
        assert_eq!(p3[[7, 7, 2]], rgb[[1, 1, 2]]);
    }
}
