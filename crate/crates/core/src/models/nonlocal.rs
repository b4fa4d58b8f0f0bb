use muralfill_autograd::{Conv2dOptions, ParamStore, Real, Var};
use rand::Rng;

use super::layers::{add_conv, Bind};
use crate::error::{Error, Result};

/// Embedded-Gaussian non-local block with a residual output projection.
///
/// `θ`, `φ`, `g` are 1×1 convolutions `C → E`; the projection `w` maps the
/// aggregated response back `E → C` and is added to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalBlock {
    pub prefix: String,
    pub channels: usize,
    pub embedding_channels: usize,
}

impl NonLocalBlock {
    pub fn new(prefix: impl Into<String>, channels: usize, embedding_channels: usize) -> Result<Self> {
        if channels == 0 || embedding_channels == 0 {
            return Err(Error::Parameter("non-local block needs positive channel counts".into()));
        }
        Ok(NonLocalBlock {
            prefix: prefix.into(),
            channels,
            embedding_channels,
        })
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let (c, e) = (self.channels, self.embedding_channels);
        for part in ["theta", "phi", "g"] {
            add_conv(store, rng, &self.name(part), e, c, 1, true);
        }
        add_conv(store, rng, &self.name("w"), c, e, 1, true);
    }

    /// `y_i = Σ_j softmax_j(θ(x_i)·φ(x_j)) g(x_j)`, shape `[N, E, H, W]`.
    pub fn response<T: Real>(&self, bind: &Bind<T>, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "non-local block expects [N, {}, H, W], got {shape:?}",
                self.channels
            )));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let e = self.embedding_channels;
        let one = Conv2dOptions::new(1, 0);
        let theta = bind.conv(x, &self.name("theta"), one)?.reshape(&[n, e, h * w])?;
        let phi = bind.conv(x, &self.name("phi"), one)?.reshape(&[n, e, h * w])?;
        let g = bind.conv(x, &self.name("g"), one)?.reshape(&[n, e, h * w])?;
        let affinity = theta.permute(&[0, 2, 1])?.matmul(&phi)?; // [N, HW, HW]
        let attn = affinity.softmax_last();
        let y = attn.matmul(&g.permute(&[0, 2, 1])?)?; // [N, HW, E]
        Ok(y.permute(&[0, 2, 1])?.reshape(&[n, e, h, w])?)
    }

    /// `x + w(y)`.
    pub fn forward<T: Real>(&self, bind: &Bind<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.response(bind, x)?;
        let z = bind.conv(&y, &self.name("w"), Conv2dOptions::new(1, 0))?;
        Ok(x.add(&z)?)
    }
}
