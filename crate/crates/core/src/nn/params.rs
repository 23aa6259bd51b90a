use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    /// Weights are trainable; buffers (running statistics) are not.
    pub trainable: bool,
    #[serde(flatten)]
    pub tensor: Tensor,
}

/// Named parameter collection for one network. Iteration order is the
/// lexicographic order of names, which fixes checkpoint and update order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

pub type Gradients = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_weight(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(
            name.into(),
            Param {
                trainable: true,
                tensor,
            },
        );
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(
            name.into(),
            Param {
                trainable: false,
                tensor,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k, &p.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// Moves every entry of `other` in under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamStore) {
        for (k, v) in other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v);
        }
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn sub_store(&self, prefix: &str) -> ParamStore {
        let lead = format!("{prefix}.");
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&lead).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Deterministic byte serialization (names, flags, shapes, values).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.trainable as u8);
            out.extend_from_slice(&p.tensor.to_bytes());
        }
        out
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn all_finite(&self) -> Option<&str> {
        self.iter()
            .find(|(_, p)| !p.tensor.is_finite())
            .map(|(k, _)| k)
    }

    /// Exponential update of running statistics: `r <- (1 - m) r + m batch`.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats)], momentum: f64) -> Result<()> {
        for (name, s) in stats {
            let blend = |t: &mut Tensor, batch: &[f64]| {
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            };
            blend(self.get_mut(&format!("{name}.running_mean"))?, &s.mean);
            blend(self.get_mut(&format!("{name}.running_var"))?, &s.var);
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// A parameter store bound onto a tape for one forward pass.
pub struct Scope<'s> {
    store: &'s ParamStore,
    vars: BTreeMap<String, Var>,
    mode: Mode,
    stats: Vec<(String, BatchStats)>,
}

impl<'s> Scope<'s> {
    /// Registers every weight of `store` as a leaf. With `trainable == false`
    /// the leaves are constants and receive no gradient.
    pub fn bind(tape: &mut Tape, store: &'s ParamStore, trainable: bool, mode: Mode) -> Self {
        let vars = store
            .trainable()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone(), trainable)))
            .collect();
        Scope {
            store,
            vars,
            mode,
            stats: Vec::new(),
        }
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&'s Tensor> {
        self.store.get(name)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub(crate) fn record_stats(&mut self, layer: &str, stats: BatchStats) {
        self.stats.push((layer.to_string(), stats));
    }

    pub fn batch_stats(&self) -> &[(String, BatchStats)] {
        &self.stats
    }

    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stats)
    }

    /// Gradients of every bound weight after `tape.backward`.
    pub fn grads(&self, tape: &Tape) -> Gradients {
        self.vars
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g)))
            .collect()
    }
}
