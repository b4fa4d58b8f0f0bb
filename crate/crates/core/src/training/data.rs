use ndarray::{s, ArrayD, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::data::{augment, generate_mask, sample_mask, DatasetManifest, MaskLibrary, Sample, SplitTag};
use crate::error::{Error, Result};
use crate::losses::Stage;
use crate::models::MIN_DISCRIMINATOR_SIDE;
use crate::raster::{stack_images, stack_planes, ImageTensor, LineDrawing, Mask, RatioBin};

/// Folds `parts` into one seed with splitmix64 steps.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

const SALT_ORDER: u64 = 1;
const SALT_AUGMENT: u64 = 2;
const SALT_MASK: u64 = 3;
const SALT_FIXED_MASK: u64 = 4;
const SALT_VAL_MASK: u64 = 5;

/// Stacked network inputs for one step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// Ground truth `[N, 3, H, W]`.
    pub images: ArrayD<f32>,
    /// `[N, 1, H, W]`, 1 = stroke.
    pub lines: ArrayD<f32>,
    /// `[N, 1, H, W]`, 1 = hole.
    pub masks: ArrayD<f32>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Resource("empty batch".into()));
        }
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: stack_images(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?,
            lines: stack_planes(&samples.iter().map(|s| &s.line.strokes).collect::<Vec<_>>())?,
            masks: stack_planes(&samples.iter().map(|s| &s.mask.hole).collect::<Vec<_>>())?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ground truth with holes zeroed.
    pub fn masked_images(&self) -> ArrayD<f32> {
        let mut out = self.images.clone();
        let (n, c) = (out.shape()[0], out.shape()[1]);
        for i in 0..n {
            let hole = self.masks.slice(s![i, 0, .., ..]);
            for ch in 0..c {
                Zip::from(out.slice_mut(s![i, ch, .., ..]))
                    .and(&hole)
                    .for_each(|v, &m| *v *= 1.0 - m);
            }
        }
        out
    }
}

/// In-memory training and validation pairs plus the mask source.
#[derive(Debug, Clone)]
pub struct TrainingData {
    train: Vec<(String, ImageTensor, LineDrawing)>,
    val: Vec<(String, ImageTensor, LineDrawing)>,
    masks: Option<MaskLibrary>,
    config: TrainConfig,
    size: (usize, usize),
    dataset_fingerprint: Option<String>,
}

fn center_crop(image: &ImageTensor, line: &LineDrawing, (h, w): (usize, usize)) -> Result<(ImageTensor, LineDrawing)> {
    let (ih, iw) = image.dims();
    if ih < h || iw < w {
        return Err(Error::Shape(format!("validation image {ih}x{iw} is smaller than the {h}x{w} training size")));
    }
    let (t, l) = ((ih - h) / 2, (iw - w) / 2);
    Ok((
        ImageTensor(image.0.slice(s![.., t..t + h, l..l + w]).to_owned()),
        LineDrawing::new(line.strokes.slice(s![t..t + h, l..l + w]).to_owned(), line.provenance),
    ))
}

impl TrainingData {
    pub fn load(manifest: &DatasetManifest, config: &TrainConfig) -> Result<Self> {
        let read = |split| -> Result<Vec<(String, ImageTensor, LineDrawing)>> {
            manifest
                .entries(split)
                .map(|e| {
                    let (img, line) = manifest.load_pair(e)?;
                    Ok((e.id.clone(), img.to_tensor(), line))
                })
                .collect()
        };
        let mut data = Self::from_pairs(read(SplitTag::Train)?, read(SplitTag::Val)?, config)?;
        data.dataset_fingerprint = Some(manifest.fingerprint.clone());
        Ok(data)
    }

    pub fn from_pairs(
        train: Vec<(String, ImageTensor, LineDrawing)>,
        val: Vec<(String, ImageTensor, LineDrawing)>,
        config: &TrainConfig,
    ) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::Resource("the training split is empty".into()))?;
        let size = config.data.augmentation.crop.unwrap_or(first.1.dims());
        for (id, img, _) in &train {
            if config.data.augmentation.crop.is_none() && img.dims() != size {
                return Err(Error::Shape(format!(
                    "training image `{id}` is {:?} but `{}` is {size:?}; set data.augmentation.crop",
                    img.dims(),
                    first.0
                )));
            }
        }
        let m = config.model.size_multiple();
        if size.0 % m != 0 || size.1 % m != 0 || size.0 < MIN_DISCRIMINATOR_SIDE || size.1 < MIN_DISCRIMINATOR_SIDE {
            return Err(Error::Shape(format!(
                "training size {}x{} must be a multiple of {m} and at least {MIN_DISCRIMINATOR_SIDE}",
                size.0, size.1
            )));
        }
        let val = val
            .into_iter()
            .map(|(id, img, line)| {
                let (img, line) = center_crop(&img, &line, size)?;
                Ok((id, img, line))
            })
            .collect::<Result<_>>()?;
        let masks = if config.data.fixed_masks {
            None
        } else {
            let lib = match &config.data.masks_dir {
                Some(dir) => MaskLibrary::load_dir(dir, size.0, size.1)?,
                None => MaskLibrary::procedural(size.0, size.1, &config.data.mask_bins, config.data.masks_per_bin, config.seed)?,
            };
            for &bin in &config.data.mask_bins {
                if lib.bin(bin).is_empty() {
                    return Err(Error::Resource(format!("no training masks in the {}% bin", bin.percent())));
                }
            }
            Some(lib)
        };
        Ok(TrainingData {
            train,
            val,
            masks,
            config: config.clone(),
            size,
            dataset_fingerprint: None,
        })
    }

    pub fn dataset_fingerprint(&self) -> Option<&str> {
        self.dataset_fingerprint.as_deref()
    }

    pub fn size(&self) -> (usize, usize) {
        self.size
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn val_len(&self) -> usize {
        self.val.len()
    }

    /// Sample indices of each batch of an epoch, in order; the last batch
    /// may be short.
    pub fn epoch_batches(&self, stage: Stage, epoch: u32, batch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, SALT_ORDER, u8::from(stage) as u64, epoch as u64]));
        order.shuffle(&mut rng);
        order.chunks(batch).map(<[usize]>::to_vec).collect()
    }

    fn fixed_mask(&self, idx: usize, salt: u64) -> Result<Mask> {
        let bins = &self.config.data.mask_bins;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, salt, idx as u64]));
        generate_mask(self.size.0, self.size.1, bins[idx % bins.len()], &mut rng)
    }

    /// Augmented training sample `idx` as drawn at `(stage, epoch)`.
    pub fn training_sample(&self, idx: usize, stage: Stage, epoch: u32) -> Result<Sample> {
        let (id, image, line) = &self.train[idx];
        let (h, w) = image.dims();
        let base = Sample::new(id.clone(), image.clone(), line.clone(), Mask::empty(h, w))?;
        let key = [self.config.seed, u8::from(stage) as u64, epoch as u64, idx as u64];
        let mut sample = augment(&base, &self.config.data.augmentation, derive_seed(&[SALT_AUGMENT, key[0], key[1], key[2], key[3]]))?;
        sample.mask = match &self.masks {
            None => self.fixed_mask(idx, SALT_FIXED_MASK)?,
            Some(lib) => {
                let seed = derive_seed(&[SALT_MASK, key[0], key[1], key[2], key[3]]);
                let bins = &self.config.data.mask_bins;
                let bin: RatioBin = bins[(seed % bins.len() as u64) as usize];
                sample_mask(lib, bin, seed.rotate_left(17))?
            }
        };
        Ok(sample)
    }

    pub fn batch(&self, indices: &[usize], stage: Stage, epoch: u32) -> Result<Batch> {
        let samples: Vec<Sample> = indices
            .iter()
            .map(|&i| self.training_sample(i, stage, epoch))
            .collect::<Result<_>>()?;
        Batch::from_samples(&samples)
    }

    /// Un-augmented training images, each with its run-long fixed mask (the
    /// training masks themselves when `fixed_masks` is set). Images larger
    /// than the training size are center-cropped.
    pub fn training_set_samples(&self) -> Result<Vec<Sample>> {
        self.train
            .iter()
            .enumerate()
            .map(|(i, (id, img, line))| {
                let (img, line) = center_crop(img, line, self.size)?;
                Sample::new(id.clone(), img, line, self.fixed_mask(i, SALT_FIXED_MASK)?)
            })
            .collect()
    }

    /// Validation images with masks fixed for the whole run.
    pub fn validation_samples(&self) -> Result<Vec<Sample>> {
        self.val
            .iter()
            .enumerate()
            .map(|(i, (id, img, line))| Sample::new(id.clone(), img.clone(), line.clone(), self.fixed_mask(i, SALT_VAL_MASK)?))
            .collect()
    }
}
