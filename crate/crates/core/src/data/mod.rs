//! Sample preparation: filtering, line extraction, augmentation, masks,
//! manifests and synthetic fixtures.

mod augment;
mod bilateral;
mod fixtures;
mod lines;
mod manifest;
mod masks;
mod prepare;

pub use augment::{apply_geometric, apply_record, augment, AugmentationConfig, Transform};
pub use bilateral::{bilateral_filter, bilateral_filter_unit};
pub use fixtures::{fixture_mural, make_fixture_set};
pub use lines::{binarize, extract_lines, EdgeExtractor, ResponseFileExtractor, SobelNms};
pub use manifest::{build_manifest, DatasetManifest, ManifestEntry, SplitCounts, SplitTag, MANIFEST_FILE};
pub use masks::{generate_mask, sample_mask, MaskLibrary};
pub use prepare::{prepare_dataset, ExtractorChoice, PrepareConfig};

use crate::error::Result;
use crate::raster::{check_dims, ImageTensor, LineDrawing, Mask};

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    pub line: LineDrawing,
    pub mask: Mask,
    pub augmentation_record: Vec<Transform>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: ImageTensor, line: LineDrawing, mask: Mask) -> Result<Self> {
        check_dims("sample line", image.dims(), line.dims())?;
        check_dims("sample mask", image.dims(), mask.dims())?;
        Ok(Sample {
            id: id.into(),
            image,
            line,
            mask,
            augmentation_record: Vec::new(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}
