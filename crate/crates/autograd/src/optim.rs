use indexmap::IndexMap;
use ndarray::{ArrayD, Zip};

use crate::error::Result;
use crate::params::ParamStore;
use crate::{real, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the whole gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: IndexMap<String, ArrayD<T>>,
    pub v: IndexMap<String, ArrayD<T>>,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: AdamState {
                step: 0,
                m: IndexMap::new(),
                v: IndexMap::new(),
            },
        }
    }

    /// Apply one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &IndexMap<String, ArrayD<T>>) -> Result<()> {
        let cfg = self.config;
        let scale = match cfg.clip_norm {
            Some(max) => {
                let norm = grads
                    .values()
                    .flat_map(|g| g.iter())
                    .map(|v| v.to_f64_lossy().powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm > max && norm > 0.0 {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let b1: T = real(cfg.beta1);
        let b2: T = real(cfg.beta2);
        let one = T::one();
        let bc1: T = real(1.0 - cfg.beta1.powi(t));
        let bc2: T = real(1.0 - cfg.beta2.powi(t));
        let lr: T = real(cfg.lr);
        let eps: T = real(cfg.eps);
        let scale: T = real(scale);
        for (name, grad) in grads {
            let param = store.get_mut(name)?;
            let m = self
                .state
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
            let v = self
                .state
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
            Zip::from(param)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;
    use ndarray::{array, IxDyn};

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", array![3.0, -2.0].into_dyn());
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            ..Default::default()
        });
        for _ in 0..500 {
            let tape = Tape::new();
            let x = store.var(&tape, "x").unwrap();
            let loss = x.add_scalar(-1.0).square().sum();
            let grads = tape.backward(&loss).unwrap();
            opt.step(&mut store, grads.params()).unwrap();
        }
        for &v in store.get("x").unwrap().iter() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.01,
            ..Default::default()
        });
        let mut grads = IndexMap::new();
        grads.insert("x".to_string(), ArrayD::from_elem(IxDyn(&[1]), 5.0));
        opt.step(&mut store, &grads).unwrap();
        let v = store.get("x").unwrap()[[0]];
        assert!((v + 0.01).abs() < 1e-8, "{v}");
    }
}
