use muralfill_autograd::{real, Real, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PixelConfig {
    /// Squared error instead of absolute error, for ablations.
    pub squared: bool,
}

/// Mean absolute (or squared) difference over a region.
///
/// `region` is `[N, 1, H, W]` with 1 on counted pixels and is broadcast over
/// channels; `None` counts every pixel. An empty region yields 0.
pub fn pixel_l1<T: Real>(output: &Var<T>, target: &Var<T>, region: Option<&Var<T>>, cfg: PixelConfig) -> Result<Var<T>> {
    let s = output.shape();
    if s != target.shape() || s.len() != 4 {
        return Err(Error::Shape(format!(
            "pixel loss: output {s:?} vs target {:?}",
            target.shape()
        )));
    }
    let d = output.sub(target)?;
    let d = if cfg.squared { d.square() } else { d.abs() };
    let Some(region) = region else {
        return Ok(d.mean());
    };
    let r = region.shape();
    if r != [s[0], 1, s[2], s[3]] {
        return Err(Error::Shape(format!("pixel loss region {r:?} does not fit output {s:?}")));
    }
    let count = region.value().sum().to_f64_lossy();
    if count <= 0.0 {
        log::warn!("pixel loss over an empty region; defined as 0");
        return Ok(output.tape().scalar(T::zero()));
    }
    Ok(d.mul(region)?.sum().scale(real(1.0 / (count * s[1] as f64))))
}
