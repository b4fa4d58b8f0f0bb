use indexmap::IndexMap;
use muralfill_autograd::{real, Real, Var};
use ndarray::{ArrayD, Axis};
use serde::{Deserialize, Serialize};

use super::perceptual::{check_layer_weights, LayerWeight};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramConfig {
    /// Layers and their γ weights; `None` reuses the style layers.
    pub layers: Option<Vec<LayerWeight>>,
    /// Match against a `bins`-bucket histogram of the target instead of its
    /// exact sorted values.
    pub bins: Option<usize>,
}

impl HistogramConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.bins {
            if b < 2 {
                return Err(Error::Config(format!("histogram bins must be at least 2, got {b}")));
            }
        }
        if let Some(layers) = &self.layers {
            check_layer_weights("histogram", layers)?;
        }
        Ok(())
    }

    pub fn resolved_layers(&self, style_layers: &[LayerWeight]) -> Vec<LayerWeight> {
        self.layers.clone().unwrap_or_else(|| style_layers.to_vec())
    }
}

/// Indices of `v` in ascending order, ties kept in index order.
fn stable_order(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    idx
}

/// Rank-order assignment: the element of rank `k` in `values` receives the
/// rank-`k` element of `reference`. When the lengths differ, rank `k`
/// takes reference rank `⌊k·m/n⌋`.
pub fn histogram_match(values: &[f64], reference: &[f64]) -> Vec<f64> {
    assert!(!values.is_empty() && !reference.is_empty(), "histogram_match on an empty channel");
    let mut sorted = reference.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (n, m) = (values.len(), sorted.len());
    let mut out = vec![0.0; n];
    for (k, i) in stable_order(values).into_iter().enumerate() {
        out[i] = sorted[k * m / n];
    }
    out
}

/// Like [`histogram_match`], but quantiles are read from a `bins`-bucket
/// histogram of `reference` with linear interpolation inside each bucket.
pub fn histogram_match_binned(values: &[f64], reference: &[f64], bins: usize) -> Vec<f64> {
    assert!(!values.is_empty() && !reference.is_empty(), "histogram_match on an empty channel");
    assert!(bins >= 2, "at least two bins");
    let lo = reference.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![lo; values.len()];
    }
    let width = (hi - lo) / bins as f64;
    let mut cdf = vec![0.0; bins];
    for &r in reference {
        let b = (((r - lo) / width) as usize).min(bins - 1);
        cdf[b] += 1.0;
    }
    let m = reference.len() as f64;
    let mut acc = 0.0;
    for c in cdf.iter_mut() {
        acc += *c / m;
        *c = acc;
    }
    let n = values.len() as f64;
    let mut out = vec![0.0; values.len()];
    for (k, i) in stable_order(values).into_iter().enumerate() {
        let q = (k as f64 + 0.5) / n;
        let b = cdf.iter().position(|&c| c >= q).unwrap_or(bins - 1);
        let prev = if b == 0 { 0.0 } else { cdf[b - 1] };
        let frac = ((q - prev) / (cdf[b] - prev)).clamp(0.0, 1.0);
        out[i] = lo + width * (b as f64 + frac);
    }
    out
}

/// `R(O)`: each `[H, W]` channel of each sample of `output` matched to the
/// same channel of `target`.
pub fn match_features<T: Real>(output: &ArrayD<T>, target: &ArrayD<T>, bins: Option<usize>) -> Result<ArrayD<T>> {
    let s = output.shape();
    if s.len() != 4 || s != target.shape() {
        return Err(Error::Shape(format!(
            "histogram matching: output {s:?} vs target {:?}",
            target.shape()
        )));
    }
    let mut out = output.clone();
    for ((mut o, src), t) in out
        .axis_iter_mut(Axis(0))
        .zip(output.axis_iter(Axis(0)))
        .zip(target.axis_iter(Axis(0)))
    {
        for c in 0..s[1] {
            let v: Vec<f64> = src.index_axis(Axis(0), c).iter().map(|x| x.to_f64_lossy()).collect();
            let r: Vec<f64> = t.index_axis(Axis(0), c).iter().map(|x| x.to_f64_lossy()).collect();
            let matched = match bins {
                Some(b) => histogram_match_binned(&v, &r, b),
                None => histogram_match(&v, &r),
            };
            for (dst, m) in o.index_axis_mut(Axis(0), c).iter_mut().zip(matched) {
                *dst = real(m);
            }
        }
    }
    Ok(out)
}

/// `Σ_l γ_l ‖O_l − R(O_l)‖_F` per sample, averaged over the batch. `R(O)`
/// enters as a constant.
pub fn histogram_from_features<T: Real>(
    output: &IndexMap<String, Var<T>>,
    target: &IndexMap<String, Var<T>>,
    layers: &[LayerWeight],
    bins: Option<usize>,
) -> Result<Option<Var<T>>> {
    let mut total: Option<Var<T>> = None;
    for lw in layers {
        let o = output
            .get(&lw.layer)
            .ok_or_else(|| Error::Config(format!("no features extracted for layer `{}`", lw.layer)))?;
        let t = target
            .get(&lw.layer)
            .ok_or_else(|| Error::Config(format!("no features extracted for layer `{}`", lw.layer)))?;
        let matched = match_features(&o.value(), &t.value(), bins)?;
        let s = o.shape();
        let resid = o.sub(&o.tape().constant(matched))?;
        let term = resid
            .reshape(&[s[0], s[1] * s[2] * s[3]])?
            .square()
            .sum_axis_keep(1)?
            .sqrt()
            .mean()
            .scale(real(lw.weight));
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total)
}
