//! Pathological feature extractor: a transformer classifier over a subject's
//! patch set whose class-token features become the GAN's real targets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_unit_tensor, Subject};
use crate::error::{Error, Result};
use crate::nn::{patch_tokens, Dense, Mode, ParamStore, Scope, VitConfig, VitEncoder};
use crate::optim::{bce_loss, Adam, AdamConfig};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    RealPathology,
    Synthesized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub source: FeatureSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfeConfig {
    pub feature_dim: usize,
    pub heads: usize,
    pub d_k: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    /// Patches are summarised into tokens of `cell x cell` means.
    pub cell: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for PfeConfig {
    fn default() -> Self {
        PfeConfig {
            feature_dim: 16,
            heads: 2,
            d_k: 8,
            depth: 1,
            mlp_hidden: 32,
            cell: 8,
            epochs: 40,
            batch_size: 16,
            adam: AdamConfig {
                lr: 3e-4,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

const PFE_FORMAT: &str = "sghf-pfe/1";

/// Serialized extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfeCheckpoint {
    pub format: String,
    pub config: PfeConfig,
    pub patch_size: usize,
    pub params: ParamStore,
}

impl PfeCheckpoint {
    pub fn of(model: &PfeModel) -> Self {
        PfeCheckpoint {
            format: PFE_FORMAT.into(),
            config: model.config.clone(),
            patch_size: model.patch_size,
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<PfeModel> {
        if self.format != PFE_FORMAT {
            return Err(Error::Config(format!("unsupported extractor format {:?}", self.format)));
        }
        PfeModel::from_params(&self.config, self.patch_size, self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Trained (or freshly initialised) extractor.
#[derive(Clone, Debug)]
pub struct PfeModel {
    pub config: PfeConfig,
    pub patch_size: usize,
    pub params: ParamStore,
    encoder: VitEncoder,
    head: Dense,
}

impl PfeModel {
    pub fn init(config: &PfeConfig, patch_size: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, &[rng::label("pfe-init")]);
        let (encoder, head) = Self::layers(config, patch_size, &mut params, &mut r)?;
        Ok(PfeModel {
            config: config.clone(),
            patch_size,
            params,
            encoder,
            head,
        })
    }

    /// Rebuilds the model around existing parameters (checkpoint loading).
    pub fn from_params(config: &PfeConfig, patch_size: usize, params: ParamStore) -> Result<Self> {
        let mut model = Self::init(config, patch_size, 0)?;
        check_same_layout(&model.params, &params, "extractor")?;
        model.params = params;
        Ok(model)
    }

    fn layers(
        c: &PfeConfig,
        patch_size: usize,
        store: &mut ParamStore,
        r: &mut impl rand::Rng,
    ) -> Result<(VitEncoder, Dense)> {
        if c.cell == 0 || c.cell > patch_size {
            return Err(Error::Config(format!(
                "token cell {} does not fit {patch_size}-pixel patches",
                c.cell
            )));
        }
        let side = patch_size / c.cell;
        let vit = VitConfig {
            token_dim: side * side,
            heads: c.heads,
            d_k: c.d_k,
            depth: c.depth,
            mlp_hidden: c.mlp_hidden,
            max_tokens: 1,
            position_embeddings: false,
            feature_dim: c.feature_dim,
        };
        let encoder = VitEncoder::init(store, "vit", &vit, r)?;
        let head = Dense::init(store, "head", c.feature_dim, 1, r);
        Ok((encoder, head))
    }

    /// Token set of a subject: one token per stain-normalised patch, centred on 0.5.
    pub fn tokens(&self, subject: &Subject) -> Result<Tensor> {
        if subject.patches.is_empty() {
            return Err(Error::Empty("patch list"));
        }
        let normed: Vec<Tensor> = subject.patches.iter().map(normalize_unit_tensor).collect();
        let t = patch_tokens(&normed, self.config.cell)?;
        let centred = t.data().iter().map(|v| v - 0.5).collect();
        Tensor::new(t.shape().to_vec(), centred)
    }

    fn features(&self, tape: &mut Tape, scope: &Scope, tokens: &[Tensor]) -> Result<Var> {
        self.encoder.forward_batch(tape, scope, tokens)
    }

    fn probabilities(&self, tape: &mut Tape, scope: &Scope, features: Var) -> Result<Var> {
        let logits = self.head.forward(tape, scope, features)?;
        Ok(tape.sigmoid(logits))
    }

    /// Feature vector of a subject from its patch set.
    pub fn extract(&self, subject: &Subject) -> Result<FeatureVector> {
        let tokens = self.tokens(subject)?;
        self.extract_tokens(&tokens)
    }

    pub fn extract_tokens(&self, tokens: &Tensor) -> Result<FeatureVector> {
        let mut tape = Tape::new();
        let scope = Scope::bind(&mut tape, &self.params, false, Mode::Eval);
        let f = self.features(&mut tape, &scope, std::slice::from_ref(tokens))?;
        Ok(FeatureVector {
            values: tape.value(f).data().to_vec(),
            source: FeatureSource::RealPathology,
        })
    }

    /// Probability of class 1 (LUSC-like).
    pub fn classify(&self, subject: &Subject) -> Result<f64> {
        let tokens = self.tokens(subject)?;
        let mut tape = Tape::new();
        let scope = Scope::bind(&mut tape, &self.params, false, Mode::Eval);
        let f = self.features(&mut tape, &scope, &[tokens])?;
        let p = self.probabilities(&mut tape, &scope, f)?;
        Ok(tape.value(p).data()[0])
    }
}

pub(crate) fn check_same_layout(expected: &ParamStore, got: &ParamStore, what: &str) -> Result<()> {
    let a: Vec<(&str, &[usize])> = expected.iter().map(|(n, p)| (n, p.tensor.shape())).collect();
    let b: Vec<(&str, &[usize])> = got.iter().map(|(n, p)| (n, p.tensor.shape())).collect();
    if a != b {
        return Err(Error::Config(format!(
            "{what} checkpoint does not match the configured architecture"
        )));
    }
    Ok(())
}

/// Trains the extractor with binary cross-entropy on subject labels.
pub fn train_pfe(subjects: &[&Subject], config: &PfeConfig, seed: u64) -> Result<(PfeModel, Vec<EpochLog>)> {
    let patch_size = subjects
        .first()
        .and_then(|s| s.patches.first())
        .map(|p| p.shape()[0])
        .ok_or(Error::Empty("training subjects"))?;
    for class in 0..2u8 {
        if subjects.iter().filter(|s| s.label == class).count() < 2 {
            return Err(Error::Data(format!("need at least 2 subjects of class {class}")));
        }
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut model = PfeModel::init(config, patch_size, seed)?;
    let tokens = subjects.iter().map(|s| model.tokens(s)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<f64> = subjects.iter().map(|s| s.label as f64).collect();
    let mut adam = Adam::new(config.adam);
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(seed, &[rng::label("pfe-epoch"), epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let bt: Vec<Tensor> = batch.iter().map(|&i| tokens[i].clone()).collect();
            let by: Vec<f64> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let scope = Scope::bind(&mut tape, &model.params, true, Mode::Train);
            let f = model.features(&mut tape, &scope, &bt)?;
            let p = model.probabilities(&mut tape, &scope, f)?;
            let loss = bce_loss(&mut tape, p, &by)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::non_finite(format!("extractor loss at epoch {epoch}")));
            }
            for (&pi, &yi) in tape.value(p).data().iter().zip(&by) {
                correct += ((pi >= 0.5) as u8 as f64 == yi) as usize;
            }
            loss_sum += value * batch.len() as f64;
            tape.backward(loss)?;
            let grads = scope.grads(&tape);
            adam.step(&mut model.params, &grads)?;
        }
        log.push(EpochLog {
            epoch,
            loss: loss_sum / subjects.len() as f64,
            accuracy: correct as f64 / subjects.len() as f64,
        });
    }
    Ok((model, log))
}

/// Feature vector of a subject's patch set under the given extractor.
pub fn extract_path_feature(subject: &Subject, model: &PfeModel) -> Result<FeatureVector> {
    model.extract(subject)
}

/// Probability that the subject is class 1.
pub fn pfe_classify(subject: &Subject, model: &PfeModel) -> Result<f64> {
    model.classify(subject)
}

/// Extracted features keyed by subject id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureCache {
    pub dim: usize,
    pub features: BTreeMap<u64, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    format: String,
    dim: usize,
    ids: Vec<u64>,
}

const CACHE_FORMAT: &str = "sghf-features/1";

impl FeatureCache {
    pub fn build(model: &PfeModel, subjects: &[&Subject]) -> Result<Self> {
        let features = subjects
            .iter()
            .map(|s| Ok((s.id, model.extract(s)?.values)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(FeatureCache {
            dim: model.config.feature_dim,
            features,
        })
    }

    pub fn get(&self, id: u64) -> Result<&[f64]> {
        self.features
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("no cached feature for subject {id}")))
    }

    /// Writes `features.json` plus one `features/<id>.bin` blob (length
    /// header, then little-endian values) per subject.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let blobs = dir.join("features");
        fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
        for (id, values) in &self.features {
            let path = blobs.join(format!("{id:06}.bin"));
            let mut buf = (values.len() as u64).to_le_bytes().to_vec();
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        let manifest = CacheManifest {
            format: CACHE_FORMAT.into(),
            dim: self.dim,
            ids: self.features.keys().copied().collect(),
        };
        let path = dir.join("features.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("features.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CacheManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format != CACHE_FORMAT {
            return Err(Error::Data(format!("{}: unsupported format", path.display())));
        }
        let mut features = BTreeMap::new();
        for id in manifest.ids {
            let path = dir.join("features").join(format!("{id:06}.bin"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let bad = || Error::Data(format!("{}: malformed feature blob", path.display()));
            let (head, body) = bytes.split_at_checked(8).ok_or_else(bad)?;
            let n = u64::from_le_bytes(head.try_into().unwrap()) as usize;
            if n != manifest.dim || body.len() != n * 8 {
                return Err(bad());
            }
            let values = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            features.insert(id, values);
        }
        Ok(FeatureCache {
            dim: manifest.dim,
            features,
        })
    }
}
