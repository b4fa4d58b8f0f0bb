use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::Real;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Named parameters plus non-trainable buffers of one network.
///
/// Values are reference counted, so recording a parameter on a tape does not
/// copy it. Every store gets a process-unique id at construction.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: u64,
    params: IndexMap<String, Arc<ArrayD<T>>>,
    buffers: IndexMap<String, Arc<ArrayD<T>>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    /// A deep copy under a fresh id.
    fn clone(&self) -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.buffers.insert(name.into(), Arc::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Arc<ArrayD<T>>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Arc<ArrayD<T>>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        self.params
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        self.buffers
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replace an existing entry (parameter or buffer), checking its shape.
    pub fn assign(&mut self, name: &str, value: ArrayD<T>) -> Result<()> {
        let slot = match self.params.get_mut(name) {
            Some(s) => s,
            None => self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?,
        };
        if slot.shape() != value.shape() {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *slot = Arc::new(value);
        Ok(())
    }

    /// Record a parameter as a trainable leaf.
    pub fn var(&self, tape: &Tape<T>, name: &str) -> Result<Var<T>> {
        Ok(tape.param(name, Arc::clone(self.get(name)?)))
    }

    /// Record a parameter as a constant (frozen networks).
    pub fn constant(&self, tape: &Tape<T>, name: &str) -> Result<Var<T>> {
        Ok(tape.constant_arc(Arc::clone(self.get(name)?)))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }

    /// Order-sensitive digest over every parameter and buffer bit pattern.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over names and f64 bit patterns
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, value) in self.params.iter().chain(self.buffers.iter()) {
            feed(name.as_bytes());
            for v in value.iter() {
                feed(&v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h
    }
}
