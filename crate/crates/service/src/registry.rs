use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use muralfill_core::models::ModelBundle;
use serde::Serialize;

use crate::error::ServiceError;

struct Entry {
    checkpoint: PathBuf,
    bundle: Option<Arc<ModelBundle>>,
}

/// What `GET /api/models` reports for one name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelView {
    pub name: String,
    pub checkpoint: PathBuf,
    /// Model fingerprint, known once loaded.
    pub fingerprint: Option<String>,
    pub loaded: bool,
    pub stage: Option<u8>,
}

/// Named checkpoints, each with at most one loaded bundle.
#[derive(Default)]
pub struct Registry {
    entries: BTreeMap<String, Entry>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `name → checkpoint`. Re-registering the same path is a no-op; a
    /// different path replaces an unloaded entry and is refused for a
    /// loaded one.
    pub fn register(&mut self, name: &str, checkpoint: &Path) -> Result<(), ServiceError> {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(ServiceError::validation(format!(
                "model name `{name}` must be non-empty ASCII letters, digits, `-`, `_` or `.`"
            )));
        }
        match self.entries.get(name) {
            Some(e) if e.checkpoint == checkpoint => return Ok(()),
            Some(e) if e.bundle.is_some() => {
                return Err(ServiceError::Conflict(format!(
                    "model `{name}` is already loaded from {}",
                    e.checkpoint.display()
                )))
            }
            _ => {}
        }
        self.entries.insert(
            name.to_string(),
            Entry {
                checkpoint: checkpoint.to_path_buf(),
                bundle: None,
            },
        );
        Ok(())
    }

    /// Loads `name` if needed. Loading an already loaded name returns the
    /// same bundle.
    pub fn load(&mut self, name: &str) -> Result<Arc<ModelBundle>, ServiceError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ServiceError::NotFound(format!("model `{name}` is not registered")))?;
        if let Some(b) = &entry.bundle {
            return Ok(b.clone());
        }
        let bundle = Arc::new(ModelBundle::load(&entry.checkpoint).map_err(|e| ServiceError::Load(e.to_string()))?);
        log::info!("loaded model `{name}` ({})", bundle.fingerprint());
        entry.bundle = Some(bundle.clone());
        Ok(bundle)
    }

    /// Registers and loads an in-memory bundle; `checkpoint` is informational.
    pub fn insert_loaded(&mut self, name: &str, checkpoint: &Path, bundle: ModelBundle) -> Result<Arc<ModelBundle>, ServiceError> {
        self.register(name, checkpoint)?;
        let entry = self.entries.get_mut(name).expect("just registered");
        let bundle = Arc::new(bundle);
        entry.bundle = Some(bundle.clone());
        Ok(bundle)
    }

    pub fn loaded(&self, name: &str) -> Option<Arc<ModelBundle>> {
        self.entries.get(name).and_then(|e| e.bundle.clone())
    }

    pub fn is_registered(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn loaded_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.bundle.is_some())
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn view(&self) -> Vec<ModelView> {
        self.entries
            .iter()
            .map(|(name, e)| ModelView {
                name: name.clone(),
                checkpoint: e.checkpoint.clone(),
                fingerprint: e.bundle.as_ref().map(|b| b.fingerprint()),
                loaded: e.bundle.is_some(),
                stage: e.bundle.as_ref().map(|b| b.stage),
            })
            .collect()
    }
}
