use indexmap::IndexMap;
use muralfill_autograd::{real, Real, Tape, Var};
use serde::{Deserialize, Serialize};

use super::extractor::{FeatureExtractor, IdentityExtractor, Vgg19};
use super::histogram::{histogram_from_features, HistogramConfig};
use super::perceptual::{content_from_features, style_from_features, ExtractorConfig, LayerWeight, PerceptualConfig};
use super::pixel::{pixel_l1, PixelConfig};
use crate::error::{Error, Result};

/// Training stage: 1 trains G1 alone, 2 trains G1 and G2 with the histogram term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Stage {
    One,
    Two,
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// Weights of the generator objective's terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub adversarial: f64,
    /// Multiplies the whole perceptual term `αL_content + βL_style`.
    pub gram: f64,
    pub l1: f64,
    pub histogram: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 0.1,
            gram: 1.0,
            l1: 1.0,
            histogram: 1.0,
        }
    }
}

impl LossWeights {
    /// The weights a stage actually uses: stage 1 has no histogram term.
    pub fn for_stage(self, stage: Stage) -> Self {
        match stage {
            Stage::One => LossWeights { histogram: 0.0, ..self },
            Stage::Two => self,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub perceptual: PerceptualConfig,
    pub histogram: HistogramConfig,
    pub pixel: PixelConfig,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (name, v) in [
            ("adversarial", w.adversarial),
            ("gram", w.gram),
            ("l1", w.l1),
            ("histogram", w.histogram),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight `{name}` must be finite and non-negative, got {v}")));
            }
        }
        self.perceptual.validate()?;
        self.histogram.validate()
    }

    pub fn for_stage(&self, stage: Stage) -> Self {
        LossConfig {
            weights: self.weights.for_stage(stage),
            ..self.clone()
        }
    }

    pub fn histogram_layers(&self) -> Vec<LayerWeight> {
        self.histogram.resolved_layers(&self.perceptual.style_layers)
    }

    /// Every layer some term reads, without duplicates.
    pub fn feature_layers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let names = self
            .perceptual
            .content_layers
            .iter()
            .chain(self.perceptual.style_layers.iter().map(|l| &l.layer))
            .cloned()
            .chain(self.histogram_layers().into_iter().map(|l| l.layer));
        for n in names {
            if !out.contains(&n) {
                out.push(n);
            }
        }
        out
    }

    /// Coefficient applied to each raw term, after stage gating.
    pub fn coefficients(&self, stage: Stage) -> Result<TermCoefficients> {
        let w = &self.weights;
        if stage == Stage::One && w.histogram != 0.0 {
            return Err(Error::Config(format!(
                "histogram weight {} is not allowed in stage 1",
                w.histogram
            )));
        }
        Ok(TermCoefficients {
            adversarial: w.adversarial,
            content: w.gram * self.perceptual.alpha,
            style: w.gram * self.perceptual.beta,
            l1: w.l1,
            histogram: w.histogram,
        })
    }
}

/// The per-term multipliers of a generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermCoefficients {
    pub adversarial: f64,
    pub content: f64,
    pub style: f64,
    pub l1: f64,
    pub histogram: f64,
}

pub const TERM_NAMES: [&str; 5] = ["adversarial", "content", "style", "l1", "histogram"];

/// Terms that contribute to the generator objective in `stage`.
pub fn active_terms(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::One => &TERM_NAMES[..4],
        Stage::Two => &TERM_NAMES,
    }
}

/// Raw (unweighted) generator terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms<V> {
    pub adversarial: V,
    pub content: V,
    pub style: V,
    pub l1: V,
    pub histogram: V,
}

impl<V> LossTerms<V> {
    fn named(&self) -> [(&'static str, &V); 5] {
        [
            ("adversarial", &self.adversarial),
            ("content", &self.content),
            ("style", &self.style),
            ("l1", &self.l1),
            ("histogram", &self.histogram),
        ]
    }
}

impl TermCoefficients {
    fn named(&self) -> [f64; 5] {
        [self.adversarial, self.content, self.style, self.l1, self.histogram]
    }
}

impl<T: Real> LossTerms<Var<T>> {
    pub fn values(&self) -> LossTerms<f64> {
        LossTerms {
            adversarial: self.adversarial.item().to_f64_lossy(),
            content: self.content.item().to_f64_lossy(),
            style: self.style.item().to_f64_lossy(),
            l1: self.l1.item().to_f64_lossy(),
            histogram: self.histogram.item().to_f64_lossy(),
        }
    }
}

fn check_finite(terms: &LossTerms<f64>, step: u64) -> Result<()> {
    for (name, v) in terms.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.to_string(),
                step,
            });
        }
    }
    Ok(())
}

/// Weighted generator objective on scalar terms.
pub fn generator_total(terms: &LossTerms<f64>, stage: Stage, cfg: &LossConfig) -> Result<f64> {
    check_finite(terms, 0)?;
    let c = cfg.coefficients(stage)?;
    Ok(terms
        .named()
        .iter()
        .zip(c.named())
        .map(|((_, v), k)| k * **v)
        .sum())
}

/// Weighted generator objective on graph terms; zero-weight terms are left
/// out of the graph.
pub fn generator_total_var<T: Real>(terms: &LossTerms<Var<T>>, stage: Stage, cfg: &LossConfig, step: u64) -> Result<Var<T>> {
    check_finite(&terms.values(), step)?;
    let c = cfg.coefficients(stage)?;
    let mut total = terms.adversarial.tape().scalar(T::zero());
    for ((_, v), k) in terms.named().into_iter().zip(c.named()) {
        if k != 0.0 {
            total = total.add(&v.scale(real(k)))?;
        }
    }
    Ok(total)
}

/// One structured training-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: Stage,
    pub step: u64,
    pub adversarial: f64,
    pub content: f64,
    pub style: f64,
    pub l1: f64,
    pub histogram: f64,
    /// Weighted sum of the five terms above.
    pub total: f64,
    pub d_loss: f64,
    pub coefficients: TermCoefficients,
    pub discriminator_id: u64,
    pub lr_g: f64,
    pub lr_d: f64,
}

impl LossReport {
    pub fn terms(&self) -> LossTerms<f64> {
        LossTerms {
            adversarial: self.adversarial,
            content: self.content,
            style: self.style,
            l1: self.l1,
            histogram: self.histogram,
        }
    }

    /// Contribution of the histogram term to `total`.
    pub fn histogram_contribution(&self) -> f64 {
        self.coefficients.histogram * self.histogram
    }

    /// Recomputes the weighted sum from the stored terms and coefficients.
    pub fn weighted_sum(&self) -> f64 {
        self.terms()
            .named()
            .iter()
            .zip(self.coefficients.named())
            .map(|((_, v), k)| k * **v)
            .sum()
    }
}

/// Loss configuration bound to its frozen feature extractor.
pub struct Losses<T: Real> {
    config: LossConfig,
    extractor: Box<dyn FeatureExtractor<T>>,
    layers: Vec<String>,
}

impl<T: Real> std::fmt::Debug for Losses<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Losses")
            .field("config", &self.config)
            .field("extractor", &self.extractor.name())
            .finish()
    }
}

impl<T: Real> Losses<T> {
    pub fn new(config: LossConfig) -> Result<Self> {
        config.validate()?;
        let layers = config.feature_layers();
        let extractor: Box<dyn FeatureExtractor<T>> = match &config.perceptual.extractor {
            ExtractorConfig::Identity => Box::new(IdentityExtractor),
            ExtractorConfig::Vgg19 { weights } => Box::new(Vgg19::<T>::new(weights, &layers)?),
        };
        Self::with_extractor(config, extractor)
    }

    pub fn with_extractor(config: LossConfig, extractor: Box<dyn FeatureExtractor<T>>) -> Result<Self> {
        config.validate()?;
        let layers = config.feature_layers();
        extractor.check_layers(&layers)?;
        Ok(Losses {
            config,
            extractor,
            layers,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    pub fn extractor(&self) -> &dyn FeatureExtractor<T> {
        self.extractor.as_ref()
    }

    pub fn features(&self, tape: &Tape<T>, image: &Var<T>) -> Result<IndexMap<String, Var<T>>> {
        self.extractor.extract(tape, image, &self.layers)
    }

    fn or_zero(tape: &Tape<T>, v: Option<Var<T>>) -> Var<T> {
        v.unwrap_or_else(|| tape.scalar(T::zero()))
    }

    pub fn style(&self, tape: &Tape<T>, output: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
        let (o, t) = (self.features(tape, output)?, self.features(tape, target)?);
        Ok(Self::or_zero(tape, style_from_features(&o, &t, &self.config.perceptual.style_layers)?))
    }

    pub fn content(&self, tape: &Tape<T>, output: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
        let (o, t) = (self.features(tape, output)?, self.features(tape, target)?);
        Ok(Self::or_zero(tape, content_from_features(&o, &t, &self.config.perceptual.content_layers)?))
    }

    pub fn histogram(&self, tape: &Tape<T>, output: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
        let (o, t) = (self.features(tape, output)?, self.features(tape, target)?);
        let layers = self.config.histogram_layers();
        Ok(Self::or_zero(tape, histogram_from_features(&o, &t, &layers, self.config.histogram.bins)?))
    }

    pub fn pixel(&self, output: &Var<T>, target: &Var<T>, region: Option<&Var<T>>) -> Result<Var<T>> {
        pixel_l1(output, target, region, self.config.pixel)
    }

    /// Content, style, pixel and (stage 2 only) histogram terms, with the
    /// adversarial slot set to 0 for the caller to fill. Features are
    /// extracted once per image.
    pub fn reconstruction(
        &self,
        tape: &Tape<T>,
        output: &Var<T>,
        target: &Var<T>,
        region: Option<&Var<T>>,
        stage: Stage,
    ) -> Result<LossTerms<Var<T>>> {
        let (o, t) = (self.features(tape, output)?, self.features(tape, target)?);
        let p = &self.config.perceptual;
        let histogram = match stage {
            Stage::One => None,
            Stage::Two => histogram_from_features(&o, &t, &self.config.histogram_layers(), self.config.histogram.bins)?,
        };
        Ok(LossTerms {
            adversarial: tape.scalar(T::zero()),
            content: Self::or_zero(tape, content_from_features(&o, &t, &p.content_layers)?),
            style: Self::or_zero(tape, style_from_features(&o, &t, &p.style_layers)?),
            l1: self.pixel(output, target, region)?,
            histogram: Self::or_zero(tape, histogram),
        })
    }
}
