use std::collections::BTreeMap;
use std::path::Path;

use muralfill_autograd::ParamStore;
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::archive::{self, Archive};
use super::discriminator::{Discriminator, DiscriminatorConfig};
use super::generator::{Generator, GeneratorConfig, GeneratorRole};
use crate::error::{Error, Result};
use crate::sha256_hex;

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

/// Architecture of all three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub g1: GeneratorConfig,
    pub g2: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            g1: GeneratorConfig::default(),
            g2: GeneratorConfig {
                zero_init_output: true,
                ..GeneratorConfig::default()
            },
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model config serializes")
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.g1.validate()?;
        self.g2.validate()?;
        self.discriminator.validate()?;
        if self.g1.factor() != self.g2.factor() {
            return Err(Error::Config("g1 and g2 must downsample by the same factor".into()));
        }
        Ok(())
    }

    /// Size multiple every input must satisfy.
    pub fn size_multiple(&self) -> usize {
        self.g1.factor()
    }
}

/// G1, G2 and the shared discriminator.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub g1: Generator<f32>,
    pub g2: Generator<f32>,
    pub d: Discriminator<f32>,
    /// Last training stage completed or in progress (0 = untrained).
    pub stage: u8,
    /// Fingerprint of the manifest the weights were trained on.
    pub dataset_fingerprint: Option<String>,
}

impl ModelBundle {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelBundle {
            config: config.clone(),
            g1: Generator::new(&config.g1, GeneratorRole::Structure, "g1", &mut rng)?,
            g2: Generator::new(&config.g2, GeneratorRole::ColorCorrection, "g2", &mut rng)?,
            d: Discriminator::new(&config.discriminator, "d", &mut rng)?,
            stage: 0,
            dataset_fingerprint: None,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    fn stores(&self) -> [&ParamStore<f32>; 3] {
        [&self.g1.params, &self.g2.params, &self.d.params]
    }

    fn stores_mut(&mut self) -> [&mut ParamStore<f32>; 3] {
        [&mut self.g1.params, &mut self.g2.params, &mut self.d.params]
    }

    /// Every parameter and buffer of the three networks, by full name.
    pub fn tensors(&self) -> Vec<(String, &ArrayD<f32>)> {
        self.stores()
            .into_iter()
            .flat_map(|s| s.params().chain(s.buffers()))
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    pub fn weights_digest(&self) -> String {
        archive::weights_digest(self.tensors().iter().map(|(k, v)| (k.as_str(), *v)))
    }

    /// Metadata shared by bundles and training checkpoints.
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::from([
            ("format_version".to_string(), ARCHIVE_FORMAT_VERSION.to_string()),
            ("model_config".to_string(), self.config.to_json()),
            ("model_fingerprint".to_string(), self.fingerprint()),
            ("stage".to_string(), self.stage.to_string()),
            ("weights_sha256".to_string(), self.weights_digest()),
        ]);
        if let Some(fp) = &self.dataset_fingerprint {
            meta.insert("dataset_fingerprint".to_string(), fp.clone());
        }
        meta
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        archive::write(path, &self.metadata(), &self.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&archive::read(path)?).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Rebuilds a bundle, checking the stored fingerprints against what the
    /// archive actually contains.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = |k: &str| {
            archive
                .metadata
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata field `{k}`")))
        };
        let version: u32 = meta("format_version")?
            .parse()
            .map_err(|_| Error::Checkpoint("unreadable format_version".into()))?;
        if version != ARCHIVE_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {ARCHIVE_FORMAT_VERSION})"
            )));
        }
        let config: ModelConfig = serde_json::from_str(meta("model_config")?)
            .map_err(|e| Error::Checkpoint(format!("model_config: {e}")))?;
        let stored = meta("model_fingerprint")?;
        let computed = config.fingerprint();
        if *stored != computed {
            return Err(Error::Checkpoint(format!(
                "model fingerprint mismatch: stored {stored}, computed {computed}"
            )));
        }
        let mut bundle = ModelBundle::new(&config, 0)?;
        bundle.stage = meta("stage")?
            .parse()
            .map_err(|_| Error::Checkpoint("unreadable stage".into()))?;
        bundle.dataset_fingerprint = archive.metadata.get("dataset_fingerprint").cloned();
        for store in bundle.stores_mut() {
            let names: Vec<String> = store
                .params()
                .chain(store.buffers())
                .map(|(k, _)| k.to_string())
                .collect();
            for name in names {
                let t = archive
                    .tensors
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))?;
                store
                    .assign(&name, t.clone())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
            }
        }
        let stored = meta("weights_sha256")?;
        let computed = bundle.weights_digest();
        if *stored != computed {
            return Err(Error::Checkpoint(format!(
                "weights fingerprint mismatch: stored {stored}, computed {computed}"
            )));
        }
        Ok(bundle)
    }
}
