use muralfill_autograd::{init, Conv2dOptions, ParamStore, Real, Tape, Var};
use rand::Rng;

use crate::error::Result;

/// A parameter store bound to a tape for one forward pass.
///
/// With `trainable` set (and a gradient-recording tape) parameters are
/// recorded as named leaves; otherwise they enter the graph as constants.
pub struct Bind<'a, T: Real> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<'a, T: Real> Bind<'a, T> {
    pub fn trainable(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Bind {
            tape,
            store,
            trainable: true,
        }
    }

    pub fn frozen(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Bind {
            tape,
            store,
            trainable: false,
        }
    }

    pub fn param(&self, name: &str) -> Result<Var<T>> {
        Ok(if self.trainable && self.tape.grad_enabled() {
            self.store.var(self.tape, name)?
        } else {
            self.store.constant(self.tape, name)?
        })
    }

    /// `{name}.weight` with an optional `{name}.bias`.
    pub fn conv(&self, x: &Var<T>, name: &str, opts: Conv2dOptions) -> Result<Var<T>> {
        let w = self.param(&format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let b = if self.store.contains(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        Ok(x.conv2d(&w, b.as_ref(), opts)?)
    }
}

/// He-initialized conv weight `[out, inp, k, k]` and optional zero bias.
pub fn add_conv<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    bias: bool,
) {
    store.insert(
        format!("{name}.weight"),
        init::kaiming_normal(&[out, inp, k, k], std::f64::consts::SQRT_2, rng),
    );
    if bias {
        store.insert(format!("{name}.bias"), init::zeros(&[out]));
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
