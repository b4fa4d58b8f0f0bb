use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LineDrawing, LineProvenance, MuralSource, RawMural};
use crate::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.toml";
const FORMAT_VERSION: u32 = 1;
const SPLIT_SEED: u64 = 0x6d75_7261;
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest root.
    pub image: PathBuf,
    pub line: PathBuf,
    pub split: SplitTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
}

/// Paired image/line files with a deterministic train/val split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub root: PathBuf,
    pub split_fractions: (f64, f64),
    /// SHA-256 over the split settings and every referenced file's bytes.
    pub fingerprint: String,
    pub warnings: Vec<String>,
    pub counts: SplitCounts,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries(&self, split: SplitTag) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image)
    }

    pub fn line_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.line)
    }

    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<(RawMural, LineDrawing)> {
        let mut mural = RawMural::load(&self.image_path(entry), MuralSource::Real)?;
        mural.id = entry.id.clone();
        let line = LineDrawing::load(&self.line_path(entry), LineProvenance::Extracted)?;
        if line.dims() != (mural.height(), mural.width()) {
            return Err(Error::Shape(format!(
                "{}: line is {:?}, image is {}x{}",
                entry.id,
                line.dims(),
                mural.height(),
                mural.width()
            )));
        }
        Ok((mural, line))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Parses a manifest and checks every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "manifest format {} is not supported (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        for e in &m.entries {
            for p in [m.image_path(e), m.line_path(e)] {
                if !p.exists() {
                    return Err(Error::Resource(format!("manifest entry {} references missing {}", e.id, p.display())));
                }
            }
        }
        Ok(m)
    }
}

pub(crate) fn scan(dir: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    let mut out: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.entry(stem).or_default().push(path);
        }
    }
    Ok(out)
}

/// Pairs `root/images/<id>.*` with `root/lines/<id>.*` and splits them.
pub fn build_manifest(root: &Path, split_fractions: (f64, f64)) -> Result<DatasetManifest> {
    let (train, val) = split_fractions;
    if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || (train + val - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "split fractions must be non-negative and sum to 1, got ({train}, {val})"
        )));
    }
    let images = scan(&root.join("images"))?;
    if images.is_empty() {
        return Err(Error::Resource(format!("no images under {}", root.join("images").display())));
    }
    let lines = scan(&root.join("lines"))?;
    let mut dups: Vec<String> = images
        .iter()
        .chain(lines.iter())
        .filter(|(_, v)| v.len() > 1)
        .map(|(k, _)| k.clone())
        .collect();
    if !dups.is_empty() {
        dups.sort();
        dups.dedup();
        return Err(Error::DuplicateIds(dups));
    }
    let mut warnings = Vec::new();
    let mut paired = Vec::new();
    for (id, img) in &images {
        match lines.get(id) {
            Some(line) => paired.push((id.clone(), img[0].clone(), line[0].clone())),
            None => {
                let msg = format!("{id}: no line drawing under lines/, excluded");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    if paired.is_empty() {
        return Err(Error::Resource(format!("no image/line pairs under {}", root.display())));
    }
    let mut order: Vec<usize> = (0..paired.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(SPLIT_SEED));
    let n_val = (paired.len() as f64 * val).round() as usize;
    let mut split = vec![SplitTag::Train; paired.len()];
    for &i in order.iter().take(n_val) {
        split[i] = SplitTag::Val;
    }

    let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).to_path_buf();
    let mut hasher_input = format!("{train}:{val}\n");
    let mut entries = Vec::with_capacity(paired.len());
    for ((id, img, line), split) in paired.into_iter().zip(split) {
        for p in [&img, &line] {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            hasher_input.push_str(&sha256_hex(&bytes));
        }
        hasher_input.push_str(&format!(" {id} {split}\n"));
        entries.push(ManifestEntry {
            id,
            image: rel(&img),
            line: rel(&line),
            split,
        });
    }
    let counts = SplitCounts {
        train: entries.iter().filter(|e| e.split == SplitTag::Train).count(),
        val: entries.iter().filter(|e| e.split == SplitTag::Val).count(),
    };
    Ok(DatasetManifest {
        format_version: FORMAT_VERSION,
        root: root.to_path_buf(),
        split_fractions,
        fingerprint: sha256_hex(hasher_input.as_bytes()),
        warnings,
        counts,
        entries,
    })
}
