use muralfill_autograd::{init, real, Conv2dOptions, ParamStore, Real, Tape, Var};
use ndarray::{ArrayD, Ix2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{add_conv, Bind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorNorm {
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub receptive_field: usize,
    pub norm: DiscriminatorNorm,
    pub activation: Activation,
    pub leaky_slope: f64,
    pub base_channels: usize,
    /// Power iterations run at construction to settle the spectral estimate.
    pub warmup_power_iterations: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            receptive_field: 70,
            norm: DiscriminatorNorm::Spectral,
            activation: Activation::LeakyRelu,
            leaky_slope: 0.2,
            base_channels: 64,
            warmup_power_iterations: 10,
        }
    }
}

/// One conv layer of the patch discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Smallest input side the discriminator accepts.
pub const MIN_DISCRIMINATOR_SIDE: usize = 32;

impl DiscriminatorConfig {
    /// Four blocks with strides 2/2/2/1 and widths b/2b/4b/8b, then a
    /// one-channel head. Kernel 4 throughout.
    pub fn layers(&self) -> Vec<DLayer> {
        let b = self.base_channels;
        let plan = [(3, b, 2), (b, 2 * b, 2), (2 * b, 4 * b, 2), (4 * b, 8 * b, 1), (8 * b, 1, 1)];
        plan.iter()
            .map(|&(i, o, s)| DLayer {
                in_channels: i,
                out_channels: o,
                kernel: 4,
                stride: s,
                padding: 1,
            })
            .collect()
    }

    /// Receptive field of one output logit in input pixels.
    pub fn computed_receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for l in self.layers() {
            rf += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        rf
    }

    pub fn total_stride(&self) -> usize {
        self.layers().iter().map(|l| l.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("discriminator base_channels must be >= 1".into()));
        }
        let rf = self.computed_receptive_field();
        if rf != self.receptive_field {
            return Err(Error::Config(format!(
                "only a {rf}px receptive field is implemented, config asks for {}",
                self.receptive_field
            )));
        }
        Ok(())
    }

    /// Logit map size for an `h`×`w` input, or `None` if it collapses.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let mut hw = (h, w);
        for l in self.layers() {
            let o = Conv2dOptions::new(l.stride, l.padding);
            hw = (o.output_size(hw.0, l.kernel)?, o.output_size(hw.1, l.kernel)?);
        }
        Some(hw)
    }
}

/// Spectrally normalized 70×70 PatchGAN.
///
/// Each conv weight `W` is divided by `σ = uᵀ W v`, where `u` is a stored
/// left singular vector estimate and `v = normalize(Wᵀu)`. `u` is refreshed by
/// [`Discriminator::update_spectral`], once per discriminator update, so that
/// forward passes are pure.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Real> {
    pub config: DiscriminatorConfig,
    pub prefix: String,
    pub params: ParamStore<T>,
}

fn normalize<T: Real>(v: &mut ArrayD<T>) {
    let n = v.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt().max(1e-12);
    let inv: T = real(1.0 / n);
    v.mapv_inplace(|x| x * inv);
}

impl<T: Real> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(config: &DiscriminatorConfig, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (i, l) in config.layers().iter().enumerate() {
            let name = format!("{prefix}.conv{i}");
            add_conv(&mut params, rng, &name, l.out_channels, l.in_channels, l.kernel, true);
            params.insert_buffer(format!("{name}.sn_u"), init::unit_vector(l.out_channels, rng));
        }
        let mut d = Discriminator {
            config: config.clone(),
            prefix: prefix.to_string(),
            params,
        };
        for _ in 0..config.warmup_power_iterations {
            d.update_spectral()?;
        }
        Ok(d)
    }

    fn layer_name(&self, i: usize) -> String {
        format!("{}.conv{i}", self.prefix)
    }

    fn weight_matrix(w: &ArrayD<T>) -> ndarray::Array2<T> {
        let o = w.shape()[0];
        w.view()
            .into_shape_with_order((o, w.len() / o))
            .expect("contiguous weight")
            .into_dimensionality::<Ix2>()
            .expect("2d")
            .to_owned()
    }

    /// `v = normalize(Wᵀu)` for layer `i`.
    fn right_vector(&self, i: usize) -> Result<ArrayD<T>> {
        let name = self.layer_name(i);
        let w = Self::weight_matrix(self.params.get(&format!("{name}.weight"))?);
        let u = self.params.buffer(&format!("{name}.sn_u"))?;
        let u1 = u.view().into_dimensionality::<ndarray::Ix1>().map_err(|e| Error::Shape(e.to_string()))?;
        let mut v = w.t().dot(&u1).into_dyn();
        normalize(&mut v);
        Ok(v)
    }

    /// One power iteration per layer: `u ← normalize(W normalize(Wᵀu))`.
    pub fn update_spectral(&mut self) -> Result<()> {
        for i in 0..self.config.layers().len() {
            let name = self.layer_name(i);
            let v = self.right_vector(i)?;
            let w = Self::weight_matrix(self.params.get(&format!("{name}.weight"))?);
            let v1 = v.into_dimensionality::<ndarray::Ix1>().map_err(|e| Error::Shape(e.to_string()))?;
            let mut u = w.dot(&v1).into_dyn();
            normalize(&mut u);
            self.params.assign(&format!("{name}.sn_u"), u)?;
        }
        Ok(())
    }

    /// Current spectral norm estimate of layer `i`.
    pub fn sigma(&self, i: usize) -> Result<f64> {
        let name = self.layer_name(i);
        let w = Self::weight_matrix(self.params.get(&format!("{name}.weight"))?);
        let u = self.params.buffer(&format!("{name}.sn_u"))?;
        let v = self.right_vector(i)?;
        let u1 = u.view().into_dimensionality::<ndarray::Ix1>().map_err(|e| Error::Shape(e.to_string()))?;
        let v1 = v.view().into_dimensionality::<ndarray::Ix1>().map_err(|e| Error::Shape(e.to_string()))?;
        Ok(u1.dot(&w.dot(&v1)).to_f64_lossy())
    }

    /// `W / σ` as a graph node; `σ` is differentiable in `W` with `u`, `v` fixed.
    fn normalized_weight(&self, bind: &Bind<T>, i: usize) -> Result<Var<T>> {
        let name = self.layer_name(i);
        let w = bind.param(&format!("{name}.weight"))?;
        let u = self.params.buffer(&format!("{name}.sn_u"))?;
        let v = self.right_vector(i)?;
        let shape = w.shape();
        let (o, k) = (shape[0], v.len());
        let outer = ArrayD::from_shape_fn(IxDyn(&[o, k]), |idx| u[[idx[0]]] * v[[idx[1]]])
            .into_shape_with_order(IxDyn(&shape))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let sigma = w.mul(&bind.tape.constant(outer))?.sum();
        Ok(w.div(&sigma)?)
    }

    /// Patch logits `[N, 1, h, w]` for images `[N, 3, H, W]` in `[-1, 1]`.
    pub fn forward(&self, tape: &Tape<T>, trainable: bool, image: &Var<T>) -> Result<Var<T>> {
        let bind = Bind {
            tape,
            store: &self.params,
            trainable,
        };
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("discriminator expects [N, 3, H, W], got {shape:?}")));
        }
        if shape[2] < MIN_DISCRIMINATOR_SIDE || shape[3] < MIN_DISCRIMINATOR_SIDE {
            return Err(Error::Shape(format!(
                "discriminator input {}x{} is smaller than the {MIN_DISCRIMINATOR_SIDE}px minimum",
                shape[2], shape[3]
            )));
        }
        let layers = self.config.layers();
        let slope: T = real(self.config.leaky_slope);
        let mut h = image.clone();
        for (i, l) in layers.iter().enumerate() {
            let w = self.normalized_weight(&bind, i)?;
            let b = bind.param(&format!("{}.bias", self.layer_name(i)))?;
            h = h.conv2d(&w, Some(&b), Conv2dOptions::new(l.stride, l.padding))?;
            if i + 1 < layers.len() {
                h = h.leaky_relu(slope);
            }
        }
        Ok(h)
    }
}
