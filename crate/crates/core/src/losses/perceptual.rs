use indexmap::IndexMap;
use muralfill_autograd::{real, Real, Var};
use serde::{Deserialize, Serialize};

use super::extractor::VggWeights;
use crate::error::{Error, Result};

/// A named feature layer and its weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerWeight {
    pub layer: String,
    pub weight: f64,
}

impl LayerWeight {
    pub fn new(layer: impl Into<String>, weight: f64) -> Self {
        LayerWeight {
            layer: layer.into(),
            weight,
        }
    }
}

/// Which frozen network supplies features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ExtractorConfig {
    Vgg19 { weights: VggWeights },
    /// Raw pixels under the layer name `pixels`.
    Identity,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::Vgg19 {
            weights: VggWeights::Random { seed: 19 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    pub extractor: ExtractorConfig,
    pub content_layers: Vec<String>,
    pub style_layers: Vec<LayerWeight>,
    /// Content weight.
    pub alpha: f64,
    /// Style weight.
    pub beta: f64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            extractor: ExtractorConfig::default(),
            content_layers: vec!["relu4_2".into()],
            style_layers: ["relu1_1", "relu2_1", "relu3_1", "relu4_1"]
                .into_iter()
                .map(|l| LayerWeight::new(l, 0.25))
                .collect(),
            alpha: 1.0,
            beta: 250.0,
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "perceptual weights must be non-negative (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        check_layer_weights("style", &self.style_layers)
    }
}

pub(crate) fn check_layer_weights(what: &str, layers: &[LayerWeight]) -> Result<()> {
    for l in layers {
        if !(l.weight >= 0.0 && l.weight.is_finite()) {
            return Err(Error::Config(format!("{what} layer `{}` has weight {}", l.layer, l.weight)));
        }
    }
    Ok(())
}

/// Unnormalized Gram matrices `F·Fᵀ` of `[N, C, H, W]` features, `[N, C, C]`.
pub fn gram_matrix<T: Real>(features: &Var<T>) -> Result<Var<T>> {
    let s = features.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("gram_matrix expects [N, C, H, W], got {s:?}")));
    }
    let f = features.reshape(&[s[0], s[1], s[2] * s[3]])?;
    Ok(f.matmul(&f.permute(&[0, 2, 1])?)?)
}

fn feature<'a, T: Real>(map: &'a IndexMap<String, Var<T>>, layer: &str) -> Result<&'a Var<T>> {
    map.get(layer)
        .ok_or_else(|| Error::Config(format!("no features extracted for layer `{layer}`")))
}

fn check_pair<T: Real>(layer: &str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "layer `{layer}`: output features {:?} vs target features {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `Σ_l w_l/(4N²M²) Σ (G − A)²` per sample, averaged over the batch.
pub fn style_from_features<T: Real>(
    output: &IndexMap<String, Var<T>>,
    target: &IndexMap<String, Var<T>>,
    layers: &[LayerWeight],
) -> Result<Option<Var<T>>> {
    let mut total: Option<Var<T>> = None;
    for lw in layers {
        let (o, t) = (feature(output, &lw.layer)?, feature(target, &lw.layer)?);
        check_pair(&lw.layer, o, t)?;
        let s = o.shape();
        let (n, c, m) = (s[0] as f64, s[1] as f64, (s[2] * s[3]) as f64);
        let diff = gram_matrix(o)?.sub(&gram_matrix(t)?)?;
        let term = diff.square().sum().scale(real(lw.weight / (4.0 * c * c * m * m * n)));
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total)
}

/// `½ Σ_l Σ (F − P)²` per sample, averaged over the batch.
pub fn content_from_features<T: Real>(
    output: &IndexMap<String, Var<T>>,
    target: &IndexMap<String, Var<T>>,
    layers: &[String],
) -> Result<Option<Var<T>>> {
    let mut total: Option<Var<T>> = None;
    for layer in layers {
        let (o, t) = (feature(output, layer)?, feature(target, layer)?);
        check_pair(layer, o, t)?;
        let n = o.shape()[0] as f64;
        let term = o.sub(t)?.square().sum().scale(real(0.5 / n));
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total)
}
