//! Run configuration: one JSON document fixing every knob of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetConfig, SynthConfig};
use crate::encoder::{EncoderConfig, VolumePrep};
use crate::error::{Error, Result};
use crate::nn::Backbone;
use crate::optim::AdamConfig;
use crate::pfe::PfeConfig;
use crate::pfsm::PfsmConfig;
use crate::rng;
use crate::sghf::{SghfConfig, Variant};

/// Whether the extractor and synthesis module are fitted inside each fold or
/// once on the whole dataset (the latter sees test subjects).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PfsmScope {
    #[default]
    PerFold,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    /// Generator parameters of the foreign cohort.
    pub synth: SynthConfig,
    pub n_subjects: usize,
    /// Ids of foreign subjects start here.
    pub id_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub external: ExternalConfig,
    pub prep: VolumePrep,
    pub pfe: PfeConfig,
    pub pfsm: PfsmConfig,
    pub sghf: SghfConfig,
    pub variant: Variant,
    pub folds: usize,
    pub pfsm_scope: PfsmScope,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// CPU-sized defaults.
    pub fn desk() -> Self {
        let dataset = DatasetConfig::default();
        let f = 8;
        let encoder = EncoderConfig {
            feature_dim: f,
            ..EncoderConfig::default()
        };
        RunConfig {
            seed: 0,
            external: ExternalConfig {
                synth: dataset.synth.shifted(),
                n_subjects: 100,
                id_offset: 1_000_000,
            },
            dataset,
            prep: VolumePrep::default(),
            pfe: PfeConfig {
                feature_dim: f,
                ..PfeConfig::default()
            },
            pfsm: PfsmConfig {
                generator: encoder.clone(),
                ..PfsmConfig::default()
            },
            sghf: SghfConfig {
                encoder,
                ..SghfConfig::default()
            },
            variant: Variant::Sghf,
            folds: 5,
            pfsm_scope: PfsmScope::PerFold,
            output_dir: PathBuf::from("runs/desk"),
        }
    }

    /// Full-size settings: 560x560 patches, 256x256x128 volumes, 512-dim
    /// features, Adam at 1e-4, 400 epochs, batches of 2 (3-D) and 16 (2-D).
    /// Recorded for completeness; far beyond a CPU budget.
    pub fn paper_scale() -> Self {
        let mut c = Self::desk();
        let f = 512;
        let adam = AdamConfig::default();
        c.dataset.synth.volume_dims = [128, 256, 256];
        c.dataset.synth.patch_size = 560;
        c.external.synth = c.dataset.synth.shifted();
        c.prep.voi = [128, 256, 256];
        let encoder = EncoderConfig {
            backbone: Backbone::CnnMedium,
            feature_dim: f,
            base_width: 64,
            vit_heads: 8,
            vit_d_k: 64,
            vit_depth: 6,
            vit_mlp_hidden: 2048,
            vit_cell: 16,
        };
        c.pfe = PfeConfig {
            feature_dim: f,
            heads: 8,
            d_k: 64,
            depth: 6,
            mlp_hidden: 2048,
            cell: 35,
            epochs: 400,
            batch_size: 16,
            adam,
        };
        c.pfsm.generator = encoder.clone();
        c.pfsm.d_hidden = 512;
        c.pfsm.batch_size = 2;
        c.pfsm.adam_g = adam;
        c.pfsm.adam_d = adam;
        c.sghf.encoder = encoder;
        c.sghf.epochs = 400;
        c.sghf.batch_size = 2;
        c.sghf.adam = adam;
        c.output_dir = PathBuf::from("runs/paper-scale");
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-scale" => Ok(Self::paper_scale()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk or paper-scale)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        let d = &self.dataset;
        if d.n_subjects == 0 {
            return bad("dataset.n_subjects");
        }
        if !(d.positive_fraction > 0.0 && d.positive_fraction < 1.0) {
            return Err(Error::Config("dataset.positive_fraction must lie in (0, 1)".into()));
        }
        for synth in [&d.synth, &self.external.synth] {
            if synth.volume_dims.contains(&0) || synth.patch_size == 0 || synth.patches_per_subject == 0 {
                return bad("volume, patch and patch-count sizes");
            }
            if !(synth.latent_sd > 0.0 && synth.noise_sd > 0.0) {
                return bad("generator standard deviations");
            }
            if !(synth.radiology_sd >= 0.0 && synth.radiology_sd.is_finite()) {
                return Err(Error::Config("radiology_sd must be finite and non-negative".into()));
            }
        }
        if self.external.n_subjects == 0 {
            return bad("external.n_subjects");
        }
        if self.prep.voi.contains(&0) || self.prep.voi.iter().zip(&d.synth.volume_dims).any(|(v, n)| v > n) {
            return Err(Error::Config(format!(
                "prep.voi {:?} must be positive and fit the volume {:?}",
                self.prep.voi, d.synth.volume_dims
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        for (name, f) in [
            ("pfe.feature_dim", self.pfe.feature_dim),
            ("pfe.epochs", self.pfe.epochs),
            ("pfe.batch_size", self.pfe.batch_size),
            ("pfsm.steps", self.pfsm.steps),
            ("sghf.epochs", self.sghf.epochs),
            ("sghf.encoder.feature_dim", self.sghf.encoder.feature_dim),
        ] {
            if f == 0 {
                return bad(name);
            }
        }
        if self.pfsm.batch_size < 2 || self.sghf.batch_size < 2 {
            return Err(Error::Config("3-D batch sizes must be at least 2 (batch norm)".into()));
        }
        if self.pfsm.generator.feature_dim != self.pfe.feature_dim {
            return Err(Error::Config(format!(
                "pfsm.generator.feature_dim ({}) must equal pfe.feature_dim ({})",
                self.pfsm.generator.feature_dim, self.pfe.feature_dim
            )));
        }
        for adam in [&self.pfe.adam, &self.pfsm.adam_g, &self.pfsm.adam_d, &self.sghf.adam] {
            if !(adam.lr > 0.0 && adam.eps > 0.0) || !(0.0..1.0).contains(&adam.beta1) || !(0.0..1.0).contains(&adam.beta2) {
                return Err(Error::Config(format!("invalid Adam settings {adam:?}")));
            }
        }
        if !(self.sghf.lambda_r > 0.0 && self.sghf.lambda_p > 0.0) {
            return bad("loss weights");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn data_seed(&self) -> u64 {
        rng::derive(self.seed, &[rng::label("data")])
    }

    pub fn external_seed(&self) -> u64 {
        rng::derive(self.seed, &[rng::label("external-data")])
    }

    pub fn external_dataset(&self) -> DatasetConfig {
        DatasetConfig {
            n_subjects: self.external.n_subjects,
            positive_fraction: self.dataset.positive_fraction,
            id_offset: self.external.id_offset,
            synth: self.external.synth.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["desk", "paper-scale"] {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        }
        assert_eq!(RunConfig::paper_scale().pfe.adam.lr, 1e-4);
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn validation_rejects_zero_subjects() {
        let mut c = RunConfig::desk();
        c.dataset.n_subjects = 0;
        assert!(c.validate().is_err());
    }
}
