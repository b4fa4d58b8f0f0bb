use muralfill_autograd::{init, real, Conv2dOptions, ParamStore, Real, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{add_conv, Bind, INSTANCE_NORM_EPS};
use super::nonlocal::NonLocalBlock;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub downsample_count: usize,
    pub residual_blocks: usize,
    pub norm: Norm,
    pub skip_connections: bool,
    /// Non-local embedding width; half the bottleneck width when unset.
    /// Only the color correction generator has a non-local block.
    pub nonlocal_embedding: Option<usize>,
    /// Start the output layer at zero so the color correction generator is
    /// the identity at initialization.
    pub zero_init_output: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 64,
            downsample_count: 3,
            residual_blocks: 4,
            norm: Norm::Instance,
            skip_connections: true,
            nonlocal_embedding: None,
            zero_init_output: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.downsample_count == 0 {
            return Err(Error::Config("generator needs base_channels >= 1 and downsample_count >= 1".into()));
        }
        Ok(())
    }

    /// Channel width at encoder level `i` (level 0 is full resolution).
    pub fn encoder_channels(&self, i: usize) -> usize {
        self.base_channels << i.min(2)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.encoder_channels(self.downsample_count)
    }

    /// Output width of the decoder stage that produces level `i`.
    pub fn decoder_channels(&self, i: usize) -> usize {
        self.encoder_channels(i.saturating_sub(1))
    }

    pub fn factor(&self) -> usize {
        1 << self.downsample_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorRole {
    /// G1: masked image + line + mask → full-frame prediction.
    Structure,
    /// G2: coarse image + mask → coarse + residual.
    ColorCorrection,
}

impl GeneratorRole {
    pub fn in_channels(self) -> usize {
        match self {
            GeneratorRole::Structure => 5,
            GeneratorRole::ColorCorrection => 4,
        }
    }
}

/// Result of a generator pass; `bottleneck` is exposed for shape checks.
pub struct GeneratorOutput<T: Real> {
    pub image: Var<T>,
    pub bottleneck: Var<T>,
}

/// U-Net style encoder/decoder with residual bottleneck.
#[derive(Debug, Clone)]
pub struct Generator<T: Real> {
    pub config: GeneratorConfig,
    pub role: GeneratorRole,
    pub prefix: String,
    pub params: ParamStore<T>,
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: &GeneratorConfig, role: GeneratorRole, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut g = Generator {
            config: config.clone(),
            role,
            prefix: prefix.to_string(),
            params: ParamStore::new(),
        };
        g.init(rng);
        Ok(g)
    }

    pub fn bind<'a>(&'a self, tape: &'a Tape<T>, trainable: bool) -> Bind<'a, T> {
        Bind {
            tape,
            store: &self.params,
            trainable,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn nonlocal(&self) -> Option<NonLocalBlock> {
        (self.role == GeneratorRole::ColorCorrection).then(|| {
            let c = self.config.bottleneck_channels();
            NonLocalBlock {
                prefix: self.name("nonlocal"),
                channels: c,
                embedding_channels: self.config.nonlocal_embedding.unwrap_or((c / 2).max(1)),
            }
        })
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let cfg = self.config.clone();
        let d = cfg.downsample_count;
        let mut store = ParamStore::new();
        // convolutions feeding an instance norm carry no bias: the norm
        // removes any per-channel constant
        add_conv(&mut store, rng, &self.name("stem"), cfg.encoder_channels(0), self.role.in_channels(), 3, false);
        for i in 1..=d {
            add_conv(&mut store, rng, &self.name(&format!("down{i}")), cfg.encoder_channels(i), cfg.encoder_channels(i - 1), 4, false);
        }
        let c = cfg.bottleneck_channels();
        for r in 0..cfg.residual_blocks {
            add_conv(&mut store, rng, &self.name(&format!("res{r}.conv1")), c, c, 3, false);
            add_conv(&mut store, rng, &self.name(&format!("res{r}.conv2")), c, c, 3, false);
        }
        if let Some(nl) = self.nonlocal() {
            nl.init(&mut store, rng);
        }
        let mut prev = c;
        for i in (0..d).rev() {
            let skip = if cfg.skip_connections { cfg.encoder_channels(i) } else { 0 };
            let out = cfg.decoder_channels(i);
            add_conv(&mut store, rng, &self.name(&format!("up{i}")), out, prev + skip, 3, false);
            prev = out;
        }
        let out_name = self.name("out");
        add_conv(&mut store, rng, &out_name, 3, prev, 3, true);
        if cfg.zero_init_output {
            store.insert(format!("{out_name}.weight"), init::zeros(&[3, prev, 3, 3]));
        }
        self.params = store;
    }

    /// Rejects sizes the encoder cannot halve `downsample_count` times.
    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let f = self.config.factor();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            let pad_h = (f - h % f) % f;
            let pad_w = (f - w % f) % f;
            return Err(Error::Shape(format!(
                "input {h}x{w} must be divisible by {f}; pad by {pad_h} rows and {pad_w} columns \
                 (to {}x{})",
                h + pad_h,
                w + pad_w
            )));
        }
        Ok(())
    }

    fn norm_relu(x: &Var<T>) -> Result<Var<T>> {
        Ok(x.instance_norm(real(INSTANCE_NORM_EPS))?.relu())
    }

    /// Shared trunk: returns the pre-activation output map and the bottleneck.
    fn trunk(&self, bind: &Bind<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.role.in_channels() {
            return Err(Error::Shape(format!(
                "{} expects [N, {}, H, W], got {shape:?}",
                self.prefix,
                self.role.in_channels()
            )));
        }
        self.check_size(shape[2], shape[3])?;
        let cfg = &self.config;
        let same = Conv2dOptions::new(1, 1);
        let down = Conv2dOptions::new(2, 1);
        let mut skips = Vec::with_capacity(cfg.downsample_count);
        let mut h = Self::norm_relu(&bind.conv(x, &self.name("stem"), same)?)?;
        for i in 1..=cfg.downsample_count {
            skips.push(h.clone());
            h = Self::norm_relu(&bind.conv(&h, &self.name(&format!("down{i}")), down)?)?;
        }
        let eps: T = real(INSTANCE_NORM_EPS);
        for r in 0..cfg.residual_blocks {
            let y = Self::norm_relu(&bind.conv(&h, &self.name(&format!("res{r}.conv1")), same)?)?;
            let y = bind.conv(&y, &self.name(&format!("res{r}.conv2")), same)?.instance_norm(eps)?;
            h = h.add(&y)?;
        }
        if let Some(nl) = self.nonlocal() {
            h = nl.forward(bind, &h)?;
        }
        let bottleneck = h.clone();
        for i in (0..cfg.downsample_count).rev() {
            let up = h.upsample_nearest2x()?;
            let merged = if cfg.skip_connections {
                Var::concat(&[&up, &skips[i]], 1)?
            } else {
                up
            };
            h = Self::norm_relu(&bind.conv(&merged, &self.name(&format!("up{i}")), same)?)?;
        }
        let out = bind.conv(&h, &self.name("out"), same)?;
        Ok((out, bottleneck))
    }

    /// G1 forward on `[N,3,H,W]` masked image, `[N,1,H,W]` line and mask.
    pub fn srn_forward(&self, tape: &Tape<T>, trainable: bool, masked_image: &Var<T>, line: &Var<T>, mask: &Var<T>) -> Result<GeneratorOutput<T>> {
        if self.role != GeneratorRole::Structure {
            return Err(Error::Config(format!("{} is not a structure generator", self.prefix)));
        }
        check_same_grid("srn", masked_image, &[line, mask])?;
        let x = Var::concat(&[masked_image, line, mask], 1)?;
        let (out, bottleneck) = self.trunk(&self.bind(tape, trainable), &x)?;
        Ok(GeneratorOutput {
            image: out.tanh(),
            bottleneck,
        })
    }

    /// G2 forward: `clamp(coarse + tanh(residual), -1, 1)`.
    pub fn ccn_forward(&self, tape: &Tape<T>, trainable: bool, coarse: &Var<T>, mask: &Var<T>) -> Result<GeneratorOutput<T>> {
        if self.role != GeneratorRole::ColorCorrection {
            return Err(Error::Config(format!("{} is not a color correction generator", self.prefix)));
        }
        check_same_grid("ccn", coarse, &[mask])?;
        let x = Var::concat(&[coarse, mask], 1)?;
        let (out, bottleneck) = self.trunk(&self.bind(tape, trainable), &x)?;
        let image = coarse.add(&out.tanh())?.clamp(-T::one(), T::one());
        Ok(GeneratorOutput { image, bottleneck })
    }
}

fn check_same_grid<T: Real>(op: &str, first: &Var<T>, others: &[&Var<T>]) -> Result<()> {
    let s = first.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("{op}: expected [N, C, H, W], got {s:?}")));
    }
    for o in others {
        let so = o.shape();
        if so.len() != 4 || so[0] != s[0] || so[2] != s[2] || so[3] != s[3] {
            return Err(Error::Shape(format!("{op}: input grids differ: {s:?} vs {so:?}")));
        }
    }
    Ok(())
}
