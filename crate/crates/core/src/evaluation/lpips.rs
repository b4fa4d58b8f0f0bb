use std::path::Path;

use muralfill_autograd::Tape;
use ndarray::{ArrayD, Axis};

use crate::error::{Error, Result};
use crate::losses::{FeatureExtractor, Vgg19, VggWeights};
use crate::models::archive;
use crate::raster::{stack_images, ImageTensor};

pub const LPIPS_LAYERS: [&str; 5] = ["relu1_2", "relu2_2", "relu3_3", "relu4_3", "relu5_3"];

/// Learned perceptual distance: channel-normalized features, squared
/// differences weighted per channel, spatially averaged, summed over layers.
pub struct Lpips {
    extractor: Box<dyn FeatureExtractor<f32>>,
    layers: Vec<String>,
    /// Per-layer channel weights; `None` weighs every channel by 1.
    linear: Vec<Option<Vec<f32>>>,
}

impl std::fmt::Debug for Lpips {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lpips")
            .field("extractor", &self.extractor.name())
            .field("layers", &self.layers)
            .field("learned", &self.linear.iter().all(Option::is_some))
            .finish()
    }
}

impl Lpips {
    /// Unit channel weights on the given extractor.
    pub fn unweighted(extractor: Box<dyn FeatureExtractor<f32>>, layers: Vec<String>) -> Result<Self> {
        extractor.check_layers(&layers)?;
        let linear = vec![None; layers.len()];
        Ok(Lpips {
            extractor,
            layers,
            linear,
        })
    }

    /// VGG-19 trunk weights plus linear heads stored as `lin{i}.weight`
    /// (`[C]` or `[1, C, 1, 1]`), one per layer of [`LPIPS_LAYERS`].
    pub fn load(vgg_weights: &Path, linear_weights: &Path) -> Result<Self> {
        let layers: Vec<String> = LPIPS_LAYERS.iter().map(|s| s.to_string()).collect();
        let vgg = Vgg19::<f32>::new(
            &VggWeights::File {
                path: vgg_weights.to_path_buf(),
            },
            &layers,
        )?;
        let arc = archive::read(linear_weights)?;
        let linear = (0..layers.len())
            .map(|i| {
                let key = format!("lin{i}.weight");
                arc.tensors
                    .get(&key)
                    .map(|t| Some(t.iter().copied().collect()))
                    .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{key}`", linear_weights.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Lpips {
            extractor: Box::new(vgg),
            layers,
            linear,
        })
    }

    fn normalized(f: &ArrayD<f32>) -> ArrayD<f32> {
        let norm = f.mapv(|v| v * v).sum_axis(Axis(1)).insert_axis(Axis(1)).mapv(|v| v.sqrt() + 1e-10);
        f / &norm
    }

    pub fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        let tape = Tape::<f32>::inference();
        let fa = self.extractor.extract(&tape, &tape.constant(stack_images(&[a])?), &self.layers)?;
        let fb = self.extractor.extract(&tape, &tape.constant(stack_images(&[b])?), &self.layers)?;
        let mut total = 0.0f64;
        for (i, layer) in self.layers.iter().enumerate() {
            let (na, nb) = (Self::normalized(&fa[layer].value()), Self::normalized(&fb[layer].value()));
            let s = na.shape().to_vec();
            let (c, hw) = (s[1], s[2] * s[3]);
            if let Some(w) = &self.linear[i] {
                if w.len() != c {
                    return Err(Error::Shape(format!("lpips layer `{layer}` has {c} channels but {} weights", w.len())));
                }
            }
            let mut acc = 0.0f64;
            for (idx, (x, y)) in na.iter().zip(nb.iter()).enumerate() {
                let ch = (idx / hw) % c;
                let w = self.linear[i].as_ref().map_or(1.0, |w| w[ch]) as f64;
                acc += w * ((x - y) as f64).powi(2);
            }
            total += acc / hw as f64;
        }
        Ok(total)
    }
}
