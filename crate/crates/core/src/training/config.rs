use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentationConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, Stage};
use crate::models::ModelConfig;
use crate::raster::RatioBin;
use crate::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs: u32,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    /// Checkpoint after every this many epochs (0 disables).
    pub every_epochs: u32,
    /// Checkpoint after every this many optimizer steps (0 disables).
    pub every_steps: u64,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        CheckpointConfig {
            every_epochs: 1,
            every_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub augmentation: AugmentationConfig,
    /// Bins training masks are drawn from.
    pub mask_bins: Vec<RatioBin>,
    /// Directory of mask PNGs; procedural masks when unset.
    pub masks_dir: Option<PathBuf>,
    /// Procedural masks generated per bin.
    pub masks_per_bin: usize,
    /// Give every training image one mask for the whole run instead of a
    /// fresh draw per step.
    pub fixed_masks: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            augmentation: AugmentationConfig::default(),
            mask_bins: RatioBin::ALL.to_vec(),
            masks_dir: None,
            masks_per_bin: 16,
            fixed_masks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr_d: f64,
    pub lr_g: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    /// Global gradient-norm clip per network; off when unset.
    pub grad_clip: Option<f64>,
    pub stage1: StageSchedule,
    pub stage2: StageSchedule,
    pub checkpoint: CheckpointConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub losses: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr_d: 1e-4,
            lr_g: 1e-5,
            betas: (0.5, 0.999),
            adam_eps: 1e-8,
            grad_clip: None,
            stage1: StageSchedule { epochs: 8, batch: 32 },
            stage2: StageSchedule { epochs: 8, batch: 8 },
            checkpoint: CheckpointConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            losses: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_d", self.lr_d), ("lr_g", self.lr_g)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        for (name, s) in [("stage1", self.stage1), ("stage2", self.stage2)] {
            if s.epochs == 0 || s.batch == 0 {
                return Err(Error::Config(format!("{name} needs epochs >= 1 and batch >= 1")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.data.mask_bins.is_empty() {
            return Err(Error::Config("data.mask_bins is empty".into()));
        }
        self.model.validate()?;
        self.losses.validate()
    }

    pub fn schedule(&self, stage: Stage) -> StageSchedule {
        match stage {
            Stage::One => self.stage1,
            Stage::Two => self.stage2,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("train config serializes")
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

/// `path: old → new` lines for every leaf that differs between two configs
/// in their JSON form.
pub fn config_diff(stored: &serde_json::Value, current: &serde_json::Value) -> Vec<String> {
    fn walk(path: &str, a: Option<&serde_json::Value>, b: Option<&serde_json::Value>, out: &mut Vec<String>) {
        use serde_json::Value;
        match (a, b) {
            (Some(Value::Object(x)), Some(Value::Object(y))) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(&p, x.get(k), y.get(k), out);
                }
            }
            (a, b) if a != b => {
                let show = |v: Option<&Value>| v.map_or("<absent>".to_string(), |v| v.to_string());
                out.push(format!("{path}: {} -> {}", show(a), show(b)));
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", Some(stored), Some(current), &mut out);
    out
}
