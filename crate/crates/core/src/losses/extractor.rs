use std::path::Path;

use indexmap::IndexMap;
use muralfill_autograd::{real, Conv2dOptions, ParamStore, Real, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{add_conv, archive, Bind};

/// A frozen network mapping images to named feature maps.
pub trait FeatureExtractor<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn has_layer(&self, layer: &str) -> bool;
    /// Features for each requested layer, `[N, C, H, W]` each. Parameters
    /// enter the graph as constants, so gradients flow to `image` only.
    fn extract(&self, tape: &Tape<T>, image: &Var<T>, layers: &[String]) -> Result<IndexMap<String, Var<T>>>;
    /// Digest of the frozen weights.
    fn checksum(&self) -> u64;

    fn check_layers(&self, layers: &[String]) -> Result<()> {
        for l in layers {
            if !self.has_layer(l) {
                return Err(Error::Config(format!("extractor `{}` has no layer `{l}`", self.name())));
            }
        }
        Ok(())
    }
}

/// Returns its input under the single layer name `pixels`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

pub const PIXELS: &str = "pixels";

impl<T: Real> FeatureExtractor<T> for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn has_layer(&self, layer: &str) -> bool {
        layer == PIXELS
    }

    fn extract(&self, _tape: &Tape<T>, image: &Var<T>, layers: &[String]) -> Result<IndexMap<String, Var<T>>> {
        <Self as FeatureExtractor<T>>::check_layers(self, layers)?;
        Ok(layers.iter().map(|l| (l.clone(), image.clone())).collect())
    }

    fn checksum(&self) -> u64 {
        0
    }
}

/// Convolution widths of the five VGG-19 blocks.
const VGG19_BLOCKS: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256, 256], &[512, 512, 512, 512], &[512, 512, 512, 512]];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Eq)]
enum VggOp {
    Conv { name: String, index: usize, inp: usize, out: usize },
    Relu { name: String },
    Pool { name: String },
}

fn vgg19_ops() -> Vec<VggOp> {
    let mut ops = Vec::new();
    let mut index = 0;
    let mut inp = 3;
    for (b, widths) in VGG19_BLOCKS.iter().enumerate() {
        for (i, &out) in widths.iter().enumerate() {
            ops.push(VggOp::Conv {
                name: format!("conv{}_{}", b + 1, i + 1),
                index,
                inp,
                out,
            });
            ops.push(VggOp::Relu {
                name: format!("relu{}_{}", b + 1, i + 1),
            });
            index += 2;
            inp = out;
        }
        ops.push(VggOp::Pool {
            name: format!("pool{}", b + 1),
        });
        index += 1;
    }
    ops
}

impl VggOp {
    fn name(&self) -> &str {
        match self {
            VggOp::Conv { name, .. } | VggOp::Relu { name } | VggOp::Pool { name } => name,
        }
    }
}

/// Where VGG-19 weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum VggWeights {
    /// A safetensors file with torchvision names (`features.{i}.weight`).
    File { path: std::path::PathBuf },
    /// Seeded He-normal weights; a fixed random feature basis.
    Random { seed: u64 },
}

/// VGG-19 convolutional trunk. Inputs in `[-1, 1]` are mapped to `[0, 1]`
/// and standardized with the ImageNet statistics before the first conv.
#[derive(Debug, Clone)]
pub struct Vgg19<T: Real> {
    ops: Vec<VggOp>,
    params: ParamStore<T>,
    /// Only ops up to and including this index were materialized.
    depth: usize,
}

impl<T: Real> Vgg19<T> {
    /// Builds the trunk up to the deepest of `layers`.
    pub fn new(weights: &VggWeights, layers: &[String]) -> Result<Self> {
        let all = vgg19_ops();
        let mut depth = 0;
        for l in layers {
            let pos = all
                .iter()
                .position(|op| op.name() == l)
                .ok_or_else(|| Error::Config(format!("extractor `vgg19` has no layer `{l}`")))?;
            depth = depth.max(pos);
        }
        let ops: Vec<VggOp> = all.into_iter().take(depth + 1).collect();
        let mut params = ParamStore::new();
        match weights {
            VggWeights::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                for op in &ops {
                    if let VggOp::Conv { name, inp, out, .. } = op {
                        add_conv(&mut params, &mut rng, name, *out, *inp, 3, true);
                    }
                }
            }
            VggWeights::File { path } => Self::load_into(&mut params, &ops, path)?,
        }
        Ok(Vgg19 { ops, params, depth })
    }

    fn load_into(params: &mut ParamStore<T>, ops: &[VggOp], path: &Path) -> Result<()> {
        let arc = archive::read(path)?;
        for op in ops {
            if let VggOp::Conv { name, index, inp, out } = op {
                for (suffix, shape) in [("weight", vec![*out, *inp, 3, 3]), ("bias", vec![*out])] {
                    let key = format!("features.{index}.{suffix}");
                    let t = arc
                        .tensors
                        .get(&key)
                        .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{key}`", path.display())))?;
                    if t.shape() != shape.as_slice() {
                        return Err(Error::Checkpoint(format!(
                            "{}: `{key}` has shape {:?}, expected {shape:?}",
                            path.display(),
                            t.shape()
                        )));
                    }
                    params.insert(format!("{name}.{suffix}"), t.mapv(|v| real::<T>(v as f64)));
                }
            }
        }
        Ok(())
    }

    pub fn deepest_layer(&self) -> &str {
        self.ops[self.depth].name()
    }

    fn normalize_input(tape: &Tape<T>, image: &Var<T>) -> Result<Var<T>> {
        let scale = ArrayD::from_shape_fn(IxDyn(&[1, 3, 1, 1]), |i| real::<T>(0.5 / IMAGENET_STD[i[1]]));
        let shift = ArrayD::from_shape_fn(IxDyn(&[1, 3, 1, 1]), |i| real::<T>((0.5 - IMAGENET_MEAN[i[1]]) / IMAGENET_STD[i[1]]));
        Ok(image.mul(&tape.constant(scale))?.add(&tape.constant(shift))?)
    }
}

impl<T: Real> FeatureExtractor<T> for Vgg19<T> {
    fn name(&self) -> &str {
        "vgg19"
    }

    fn has_layer(&self, layer: &str) -> bool {
        self.ops.iter().any(|op| op.name() == layer)
    }

    fn extract(&self, tape: &Tape<T>, image: &Var<T>, layers: &[String]) -> Result<IndexMap<String, Var<T>>> {
        <Self as FeatureExtractor<T>>::check_layers(self, layers)?;
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("vgg19 expects [N, 3, H, W], got {shape:?}")));
        }
        let last = self
            .ops
            .iter()
            .rposition(|op| layers.iter().any(|l| l == op.name()))
            .unwrap_or(0);
        let bind = Bind::frozen(tape, &self.params);
        let mut h = Self::normalize_input(tape, image)?;
        let mut out = IndexMap::new();
        for op in &self.ops[..=last] {
            h = match op {
                VggOp::Conv { name, .. } => bind.conv(&h, name, Conv2dOptions::new(1, 1))?,
                VggOp::Relu { .. } => h.relu(),
                VggOp::Pool { .. } => h.max_pool2x2()?,
            };
            if layers.iter().any(|l| l == op.name()) {
                out.insert(op.name().to_string(), h.clone());
            }
        }
        // requested order, not network order
        Ok(layers.iter().map(|l| (l.clone(), out[l].clone())).collect())
    }

    fn checksum(&self) -> u64 {
        self.params.checksum()
    }
}
