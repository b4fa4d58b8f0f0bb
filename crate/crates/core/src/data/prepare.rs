use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bilateral::bilateral_filter;
use super::lines::{extract_lines, EdgeExtractor, ResponseFileExtractor, SobelNms};
use super::manifest::{build_manifest, scan, DatasetManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::raster::{LineDrawing, LineProvenance, MuralSource, RawMural};

/// Which edge detector derives missing line drawings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorChoice {
    SobelNms,
    /// Precomputed `[0, 1]` response maps named `<id>.png`.
    ResponseFiles { dir: PathBuf },
}

/// Settings of `prepare`: raw murals in, a manifest-ready dataset out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub source: MuralSource,
    pub spatial_sigma: f64,
    pub range_sigma: f64,
    pub threshold: f64,
    pub extractor: ExtractorChoice,
    /// Hand-made or completed drawings named `<id>.png`; used instead of
    /// extraction when present.
    pub lines_dir: Option<PathBuf>,
    pub val_fraction: f64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            source: MuralSource::Real,
            spatial_sigma: 3.0,
            range_sigma: 0.1,
            threshold: 0.5,
            extractor: ExtractorChoice::SobelNms,
            lines_dir: None,
            val_fraction: 0.1,
        }
    }
}

/// Copies every mural under `input` into `out/images`, writes its line
/// drawing to `out/lines` (extracted from the bilateral-filtered image
/// unless one is supplied) and saves the manifest.
pub fn prepare_dataset(input: &Path, out: &Path, cfg: &PrepareConfig) -> Result<DatasetManifest> {
    let murals = scan(input)?;
    if murals.is_empty() {
        return Err(Error::Resource(format!("no images under {}", input.display())));
    }
    let extractor: Box<dyn EdgeExtractor> = match &cfg.extractor {
        ExtractorChoice::SobelNms => Box::new(SobelNms),
        ExtractorChoice::ResponseFiles { dir } => Box::new(ResponseFileExtractor { dir: dir.clone() }),
    };
    let supplied = match &cfg.lines_dir {
        Some(dir) => scan(dir)?,
        None => Default::default(),
    };
    for (id, paths) in &murals {
        if paths.len() > 1 {
            return Err(Error::DuplicateIds(vec![id.clone()]));
        }
        let mut mural = RawMural::load(&paths[0], cfg.source)?;
        mural.id = id.clone();
        let line = match supplied.get(id) {
            Some(p) => {
                let line = LineDrawing::load(&p[0], LineProvenance::Manual)?;
                if line.dims() != (mural.height(), mural.width()) {
                    return Err(Error::Shape(format!(
                        "{}: line drawing is {:?}, image is {}x{}",
                        p[0].display(),
                        line.dims(),
                        mural.height(),
                        mural.width()
                    )));
                }
                line
            }
            None => {
                let filtered = bilateral_filter(&mural, cfg.spatial_sigma, cfg.range_sigma)?;
                extract_lines(&filtered, extractor.as_ref(), cfg.threshold)?
            }
        };
        mural.save(&out.join("images").join(format!("{id}.png")))?;
        line.save(&out.join("lines").join(format!("{id}.png")))?;
    }
    let manifest = build_manifest(out, (1.0 - cfg.val_fraction, cfg.val_fraction))?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixture_mural;

    #[test]
    fn prepares_extracted_and_supplied_lines() {
        let dir = tempfile::tempdir().unwrap();
        let (raw, out, lines) = (dir.path().join("raw"), dir.path().join("out"), dir.path().join("manual"));
        for i in 0..4 {
            let (m, l) = fixture_mural("x", 64, i).unwrap();
            m.save(&raw.join(format!("m{i}.png"))).unwrap();
            if i == 0 {
                l.save(&lines.join("m0.png")).unwrap();
            }
        }
        let cfg = PrepareConfig {
            lines_dir: Some(lines.clone()),
            val_fraction: 0.25,
            ..PrepareConfig::default()
        };
        let manifest = prepare_dataset(&raw, &out, &cfg).unwrap();
        assert_eq!((manifest.counts.train, manifest.counts.val), (3, 1));
        assert!(out.join(MANIFEST_FILE).exists());
        let (m0, l0) = fixture_mural("x", 64, 0).unwrap();
        let e0 = manifest.entries.iter().find(|e| e.id == "m0").unwrap();
        let (img, line) = manifest.load_pair(e0).unwrap();
        assert_eq!(img.pixels(), m0.pixels());
        assert_eq!(line.strokes, l0.strokes);
        for e in &manifest.entries {
            assert!(manifest.load_pair(e).unwrap().1.stroke_count() > 0, "{}", e.id);
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = prepare_dataset(dir.path(), &dir.path().join("o"), &PrepareConfig::default());
        assert!(matches!(r, Err(Error::Resource(_))));
    }
}
