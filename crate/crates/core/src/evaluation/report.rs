use std::fmt::Write as _;
use std::path::Path;

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lpips::Lpips;
use super::metrics::{mse, psnr_from_mse, ssim};
use crate::data::{generate_mask, DatasetManifest, MaskLibrary, SplitTag};
use crate::error::{Error, Result};
use crate::models::{archive, composite, ModelBundle};
use crate::raster::{ImageTensor, LineDrawing, Mask, RatioBin};
use crate::training::derive_seed;

pub const REPORT_CSV: &str = "metrics.csv";
pub const REPORT_SUMMARY: &str = "summary.json";
pub const REPORT_PLOT: &str = "plot_data.json";

/// Anything that fills holes; returns the composited image.
pub trait Inpainter {
    fn name(&self) -> String;
    fn fingerprint(&self) -> Option<String> {
        None
    }
    /// Input sides must be multiples of this.
    fn size_multiple(&self) -> usize {
        1
    }
    fn inpaint(&self, image: &ImageTensor, line: &LineDrawing, mask: &Mask) -> Result<ImageTensor>;
}

impl Inpainter for ModelBundle {
    fn name(&self) -> String {
        "muralfill".into()
    }

    fn fingerprint(&self) -> Option<String> {
        Some(self.weights_digest())
    }

    fn size_multiple(&self) -> usize {
        self.config.size_multiple()
    }

    fn inpaint(&self, image: &ImageTensor, line: &LineDrawing, mask: &Mask) -> Result<ImageTensor> {
        Ok(ModelBundle::inpaint(self, image, line, mask)?.composite)
    }
}

/// Returns the ground truth untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityInpainter;

impl Inpainter for IdentityInpainter {
    fn name(&self) -> String {
        "identity".into()
    }

    fn inpaint(&self, image: &ImageTensor, _line: &LineDrawing, _mask: &Mask) -> Result<ImageTensor> {
        Ok(image.clone())
    }
}

/// Fills every hole pixel with one gray level (in `[-1, 1]`).
#[derive(Debug, Clone, Copy)]
pub struct ConstantFill(pub f32);

impl Inpainter for ConstantFill {
    fn name(&self) -> String {
        format!("constant-fill({})", self.0)
    }

    fn inpaint(&self, image: &ImageTensor, _line: &LineDrawing, mask: &Mask) -> Result<ImageTensor> {
        let (h, w) = image.dims();
        composite(&ImageTensor::filled(h, w, self.0), image, mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub ratio_bin: RatioBin,
    pub hole_fraction: f64,
    pub mse: f64,
    /// `None` when the output equals the ground truth.
    pub psnr: Option<f64>,
    pub identical: bool,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

/// Arithmetic means over a group of rows. PSNR is averaged over rows with
/// a finite value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ratio_bin: Option<RatioBin>,
    pub count: usize,
    pub identical: usize,
    pub mse: f64,
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

impl Aggregate {
    fn of(ratio_bin: Option<RatioBin>, rows: &[&MetricsRow]) -> Self {
        let n = rows.len().max(1) as f64;
        let finite: Vec<f64> = rows.iter().filter_map(|r| r.psnr).collect();
        let lpips: Vec<f64> = rows.iter().filter_map(|r| r.lpips).collect();
        Aggregate {
            ratio_bin,
            count: rows.len(),
            identical: rows.iter().filter(|r| r.identical).count(),
            mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
            psnr: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            lpips: (!lpips.is_empty() && lpips.len() == rows.len()).then(|| lpips.iter().sum::<f64>() / lpips.len() as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub model_fingerprint: Option<String>,
    pub dataset_fingerprint: Option<String>,
    pub seed: u64,
    /// Why LPIPS is absent, when it is.
    pub lpips_skipped: Option<String>,
    pub warnings: Vec<String>,
    pub rows: Vec<MetricsRow>,
    pub per_bin: Vec<Aggregate>,
    pub overall: Aggregate,
}

/// One evaluation image.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub id: String,
    pub image: ImageTensor,
    pub line: LineDrawing,
}

/// Where evaluation masks come from.
#[derive(Debug, Clone)]
pub enum MaskSource {
    /// A fresh procedural mask per (bin, image), seeded.
    Procedural,
    /// Seeded picks from a mask library loaded at the evaluation size.
    Library(MaskLibrary),
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub bins: Vec<RatioBin>,
    pub seed: u64,
    pub masks: MaskSource,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bins: RatioBin::ALL.to_vec(),
            seed: 0,
            masks: MaskSource::Procedural,
        }
    }
}

const SALT_EVAL_MASK: u64 = 0x6576_616c;

fn eval_mask(opts: &EvalOptions, bin: RatioBin, index: usize, (h, w): (usize, usize)) -> Result<Mask> {
    let seed = derive_seed(&[SALT_EVAL_MASK, opts.seed, bin.percent() as u64, index as u64]);
    match &opts.masks {
        MaskSource::Procedural => generate_mask(h, w, bin, &mut ChaCha8Rng::seed_from_u64(seed)),
        MaskSource::Library(lib) => {
            let pool = lib.bin(bin);
            if pool.is_empty() {
                return Err(Error::Resource(format!("no evaluation masks in the {}% bin", bin.percent())));
            }
            let m = &pool[(seed % pool.len() as u64) as usize];
            if m.dims() != (h, w) {
                return Err(Error::Shape(format!("library mask {:?} does not fit a {h}x{w} image", m.dims())));
            }
            Ok(m.clone())
        }
    }
}

/// Center crop to the largest size that is a multiple of `m`.
fn crop_to_multiple(img: &EvalImage, m: usize) -> EvalImage {
    let (h, w) = img.image.dims();
    let (ch, cw) = (h - h % m, w - w % m);
    if (ch, cw) == (h, w) {
        return img.clone();
    }
    let (t, l) = ((h - ch) / 2, (w - cw) / 2);
    EvalImage {
        id: img.id.clone(),
        image: ImageTensor(img.image.0.slice(s![.., t..t + ch, l..l + cw]).to_owned()),
        line: LineDrawing::new(img.line.strokes.slice(s![t..t + ch, l..l + cw]).to_owned(), img.line.provenance),
    }
}

/// Metrics of `model`'s composites against the ground truth for every image
/// under one seeded mask per bin. Rows are ordered bin-major.
pub fn evaluate_set(model: &dyn Inpainter, images: &[EvalImage], opts: &EvalOptions, lpips: Option<&Lpips>) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::Resource("nothing to evaluate: the image set is empty".into()));
    }
    let images: Vec<EvalImage> = images.iter().map(|i| crop_to_multiple(i, model.size_multiple())).collect();
    let mut rows = Vec::with_capacity(images.len() * opts.bins.len());
    for &bin in &opts.bins {
        for (i, img) in images.iter().enumerate() {
            let mask = eval_mask(opts, bin, i, img.image.dims())?;
            let out = model.inpaint(&img.image, &img.line, &mask)?;
            let (a, b) = (out.to_unit(), img.image.to_unit());
            let m = mse(&a, &b)?;
            let p = psnr_from_mse(m);
            rows.push(MetricsRow {
                id: img.id.clone(),
                ratio_bin: bin,
                hole_fraction: mask.hole_fraction(),
                mse: m,
                psnr: p.is_finite().then_some(p),
                identical: m == 0.0,
                ssim: ssim(&a, &b)?,
                lpips: lpips.map(|l| l.distance(&out, &img.image)).transpose()?,
            });
        }
    }
    let per_bin = opts
        .bins
        .iter()
        .map(|&bin| Aggregate::of(Some(bin), &rows.iter().filter(|r| r.ratio_bin == bin).collect::<Vec<_>>()))
        .collect();
    let overall = Aggregate::of(None, &rows.iter().collect::<Vec<_>>());
    Ok(MetricsReport {
        model: model.name(),
        model_fingerprint: model.fingerprint(),
        dataset_fingerprint: None,
        seed: opts.seed,
        lpips_skipped: lpips.is_none().then(|| "no LPIPS weights configured".to_string()),
        warnings: Vec::new(),
        rows,
        per_bin,
        overall,
    })
}

/// Evaluates on the manifest's validation split. A dataset fingerprint
/// recorded in the bundle that differs from the manifest's is reported as a
/// warning.
pub fn evaluate_manifest(bundle: &ModelBundle, manifest: &DatasetManifest, opts: &EvalOptions, lpips: Option<&Lpips>) -> Result<MetricsReport> {
    let images = manifest
        .entries(SplitTag::Val)
        .map(|e| {
            let (img, line) = manifest.load_pair(e)?;
            Ok(EvalImage {
                id: e.id.clone(),
                image: img.to_tensor(),
                line,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if images.is_empty() {
        return Err(Error::Resource("the manifest has no validation images".into()));
    }
    let mut report = evaluate_set(bundle, &images, opts, lpips)?;
    report.dataset_fingerprint = Some(manifest.fingerprint.clone());
    if let Some(trained_on) = &bundle.dataset_fingerprint {
        if *trained_on != manifest.fingerprint {
            let msg = format!(
                "model was trained on dataset {trained_on}, evaluating on {}",
                manifest.fingerprint
            );
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
    }
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,ratio_bin,hole_fraction,mse,psnr,identical,ssim,lpips\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.8},{},{},{:.6},{}",
                r.id,
                r.ratio_bin.percent(),
                r.hole_fraction,
                r.mse,
                fmt_opt(r.psnr),
                r.identical,
                r.ssim,
                fmt_opt(r.lpips)
            );
        }
        out
    }

    /// Everything but the rows.
    pub fn summary_json(&self) -> Result<String> {
        let summary = serde_json::json!({
            "model": self.model,
            "model_fingerprint": self.model_fingerprint,
            "dataset_fingerprint": self.dataset_fingerprint,
            "seed": self.seed,
            "lpips_skipped": self.lpips_skipped,
            "warnings": self.warnings,
            "rows": self.rows.len(),
            "per_bin": self.per_bin,
            "overall": self.overall,
        });
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Serde(e.to_string()))
    }

    /// `(ratio, psnr, ssim)` series per model for ratio-vs-quality charts.
    pub fn plot_json(&self) -> Result<String> {
        let series: Vec<_> = self
            .per_bin
            .iter()
            .map(|a| {
                serde_json::json!({
                    "ratio": a.ratio_bin.map(|b| b.percent() as f64 / 100.0),
                    "psnr": a.psnr,
                    "ssim": a.ssim,
                })
            })
            .collect();
        let plot = serde_json::json!({ "models": [{ "name": self.model, "series": series }] });
        serde_json::to_string_pretty(&plot).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Writes the table, summary and plot data into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        archive::write_atomic(&dir.join(REPORT_CSV), self.to_csv().as_bytes())?;
        archive::write_atomic(&dir.join(REPORT_SUMMARY), self.summary_json()?.as_bytes())?;
        archive::write_atomic(&dir.join(REPORT_PLOT), self.plot_json()?.as_bytes())
    }
}
