//! Pathological feature synthesis: a label-conditioned generator from CT
//! volumes to feature vectors, trained against a two-headed discriminator.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Subject;
use crate::encoder::{with_label_channel, EncoderConfig, VolumeEncoder, VolumePrep};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Dense, Mode, ParamStore, Scope};
use crate::optim::{gan_d_loss, gan_g_loss, Adam, AdamConfig, GeneratorLoss};
use crate::pfe::{check_same_layout, FeatureCache, FeatureSource, FeatureVector};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfsmConfig {
    pub generator: EncoderConfig,
    /// Width of the discriminator's hidden layers.
    pub d_hidden: usize,
    /// Discriminator updates per generator update.
    pub k_d: usize,
    /// Generator updates (outer iterations).
    pub steps: usize,
    pub batch_size: usize,
    pub adam_g: AdamConfig,
    pub adam_d: AdamConfig,
    pub g_loss: GeneratorLoss,
    pub bn_momentum: f64,
    /// Z-score real features per dimension (training-set statistics) before
    /// they become GAN targets.
    #[serde(default)]
    pub standardize_targets: bool,
}

impl Default for PfsmConfig {
    fn default() -> Self {
        let adam = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let slow = AdamConfig { lr: 2e-4, ..adam };
        PfsmConfig {
            generator: EncoderConfig::default(),
            d_hidden: 16,
            k_d: 5,
            steps: 200,
            batch_size: 8,
            adam_g: adam,
            adam_d: slow,
            g_loss: GeneratorLoss::NonSaturating,
            bn_momentum: 0.1,
            standardize_targets: true,
        }
    }
}

/// Generator: volume encoder over `[volume; c]` (two channels).
#[derive(Clone, Debug)]
pub struct Generator {
    pub params: ParamStore,
    /// Shape of one unconditioned input, `[1, D, H, W]`.
    pub input_shape: Vec<usize>,
    encoder: VolumeEncoder,
}

impl Generator {
    /// Rebuilds a generator around checkpointed parameters.
    pub fn from_params(cfg: &EncoderConfig, input_shape: &[usize], params: ParamStore) -> Result<Self> {
        let mut g = Self::init(cfg, input_shape, &mut rng::stream(0, &[]))?;
        check_same_layout(&g.params, &params, "generator")?;
        g.params = params;
        Ok(g)
    }

    pub fn feature_dim(&self) -> usize {
        match &self.encoder {
            VolumeEncoder::Cnn(e) => e.config.feature_dim,
            VolumeEncoder::Vit { encoder, .. } => encoder.config.feature_dim,
        }
    }

    fn init(cfg: &EncoderConfig, input_shape: &[usize], r: &mut ChaCha8Rng) -> Result<Self> {
        if input_shape.len() != 4 || input_shape[0] != 1 {
            return Err(Error::shape(format!(
                "generator input must be [1, D, H, W], got {input_shape:?}"
            )));
        }
        let mut params = ParamStore::new();
        let dims = [input_shape[1], input_shape[2], input_shape[3]];
        let encoder = VolumeEncoder::init(&mut params, "gen", cfg, 2, dims, r)?;
        Ok(Generator {
            params,
            input_shape: input_shape.to_vec(),
            encoder,
        })
    }

    /// Conditioned batch forward, `[B, F]`. The caller owns the binding so the
    /// same generator can be trainable (GAN) or frozen (fusion model).
    pub fn forward(&self, tape: &mut Tape, scope: &mut Scope, inputs: &[Tensor], c: &[f64]) -> Result<Var> {
        if inputs.len() != c.len() {
            return Err(Error::shape("one label per generator input"));
        }
        let conditioned = inputs
            .iter()
            .zip(c)
            .map(|(x, &c)| {
                if x.shape() != self.input_shape.as_slice() {
                    return Err(Error::shape(format!(
                        "generator expects {:?}, got {:?}",
                        self.input_shape,
                        x.shape()
                    )));
                }
                with_label_channel(x, c)
            })
            .collect::<Result<Vec<_>>>()?;
        self.encoder.forward(tape, scope, &conditioned)
    }
}

/// Three dense layers (the first two followed by ReLU then batch norm) and
/// two sigmoid heads: source (real = 1) and class.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
    pub input_dim: usize,
    fc1: Dense,
    bn1: BatchNorm,
    fc2: Dense,
    bn2: BatchNorm,
    fc3: Dense,
    source: Dense,
    class: Dense,
}

impl Discriminator {
    fn init(input_dim: usize, hidden: usize, r: &mut ChaCha8Rng) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        let mut p = ParamStore::new();
        Ok(Discriminator {
            fc1: Dense::init(&mut p, "disc.fc1", input_dim, hidden, r),
            bn1: BatchNorm::init(&mut p, "disc.bn1", hidden),
            fc2: Dense::init(&mut p, "disc.fc2", hidden, hidden, r),
            bn2: BatchNorm::init(&mut p, "disc.bn2", hidden),
            fc3: Dense::init(&mut p, "disc.fc3", hidden, hidden, r),
            source: Dense::init(&mut p, "disc.source", hidden, 1, r),
            class: Dense::init(&mut p, "disc.class", hidden, 1, r),
            params: p,
            input_dim,
        })
    }

    /// `[B, F] -> (y1 [B, 1], y2 [B, 1])`.
    pub fn forward(&self, tape: &mut Tape, scope: &mut Scope, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::shape(format!(
                "discriminator expects [B, {}], got {s:?}",
                self.input_dim
            )));
        }
        let h = self.fc1.forward(tape, scope, x)?;
        let h = tape.relu(h);
        let h = self.bn1.forward(tape, scope, h)?;
        let h = self.fc2.forward(tape, scope, h)?;
        let h = tape.relu(h);
        let h = self.bn2.forward(tape, scope, h)?;
        let h = self.fc3.forward(tape, scope, h)?;
        let h = tape.relu(h);
        let y1 = self.source.forward(tape, scope, h)?;
        let y2 = self.class.forward(tape, scope, h)?;
        Ok((tape.sigmoid(y1), tape.sigmoid(y2)))
    }
}

/// Per-dimension affine map from real feature space to the generator's target space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl FeatureScale {
    /// Population statistics; dimensions with zero spread keep unit scale.
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("feature rows"))?;
        let dim = first.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("feature rows differ in length"));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let sd = (0..dim)
            .map(|k| {
                let v = (rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
                if v > 1e-12 { v } else { 1.0 }
            })
            .collect();
        Ok(FeatureScale { mean, sd })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.sd).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Generator, discriminator and whether they have been through training.
#[derive(Clone, Debug)]
pub struct PfsmModel {
    pub config: PfsmConfig,
    pub feature_dim: usize,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub trained: bool,
    /// Set when the targets were standardized; synthesized features live in
    /// the scaled space.
    pub scale: Option<FeatureScale>,
}

impl PfsmModel {
    pub fn init(config: &PfsmConfig, input_shape: &[usize], feature_dim: usize, seed: u64) -> Result<Self> {
        if config.generator.feature_dim != feature_dim {
            return Err(Error::Config(format!(
                "generator emits {} features but targets have {feature_dim}",
                config.generator.feature_dim
            )));
        }
        let mut r = rng::stream(seed, &[rng::label("pfsm-init")]);
        let generator = Generator::init(&config.generator, input_shape, &mut r)?;
        let discriminator = Discriminator::init(feature_dim, config.d_hidden, &mut r)?;
        Ok(PfsmModel {
            config: config.clone(),
            feature_dim,
            generator,
            discriminator,
            trained: false,
            scale: None,
        })
    }

    /// Rebuilds a trained model from checkpointed parameter sets.
    pub fn from_params(
        config: &PfsmConfig,
        input_shape: &[usize],
        feature_dim: usize,
        generator: ParamStore,
        discriminator: ParamStore,
    ) -> Result<Self> {
        let mut m = Self::init(config, input_shape, feature_dim, 0)?;
        check_same_layout(&m.generator.params, &generator, "generator")?;
        check_same_layout(&m.discriminator.params, &discriminator, "discriminator")?;
        m.generator.params = generator;
        m.discriminator.params = discriminator;
        m.trained = true;
        Ok(m)
    }
}

const PFSM_FORMAT: &str = "sghf-pfsm/1";

/// Serialized synthesis module (both networks and the target scaling).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfsmCheckpoint {
    pub format: String,
    pub config: PfsmConfig,
    pub input_shape: Vec<usize>,
    pub feature_dim: usize,
    pub scale: Option<FeatureScale>,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
}

impl PfsmCheckpoint {
    pub fn of(model: &PfsmModel) -> Self {
        PfsmCheckpoint {
            format: PFSM_FORMAT.into(),
            config: model.config.clone(),
            input_shape: model.generator.input_shape.clone(),
            feature_dim: model.feature_dim,
            scale: model.scale.clone(),
            generator: model.generator.params.clone(),
            discriminator: model.discriminator.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<PfsmModel> {
        if self.format != PFSM_FORMAT {
            return Err(Error::Config(format!("unsupported synthesis-module format {:?}", self.format)));
        }
        let mut m = PfsmModel::from_params(
            &self.config,
            &self.input_shape,
            self.feature_dim,
            self.generator,
            self.discriminator,
        )?;
        m.scale = self.scale;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// One training example: unconditioned generator input, label, real target.
#[derive(Clone, Debug, PartialEq)]
pub struct GanSample {
    pub input: Tensor,
    pub label: u8,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    /// Real/fake accuracy of the last discriminator batch.
    pub acc_source: f64,
    /// Class-head accuracy on the real half of that batch.
    pub acc_class: f64,
}

/// Outcome of one discriminator or generator update.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: f64,
    pub acc_source: f64,
    pub acc_class: f64,
    /// Parameters that received a gradient on this step.
    pub touched: BTreeSet<String>,
}

/// Cycles through shuffled permutations of the sample indices.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn next(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

struct Forward {
    tape: Tape,
    y1: Var,
    y2: Var,
    labels: Vec<f64>,
}

/// Alternating optimisation state. Exposed so single steps can be inspected.
pub struct GanTrainer<'a> {
    pub model: PfsmModel,
    samples: &'a [GanSample],
    adam_g: Adam,
    adam_d: Adam,
    sampler: Sampler,
}

impl<'a> GanTrainer<'a> {
    pub fn new(samples: &'a [GanSample], config: &PfsmConfig, seed: u64) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("GAN training set"))?;
        if config.batch_size < 2 {
            return Err(Error::Config("GAN batch size must be at least 2".into()));
        }
        let dim = first.target.len();
        if samples.iter().any(|s| s.target.len() != dim || s.label > 1) {
            return Err(Error::Data("inconsistent GAN targets".into()));
        }
        let model = PfsmModel::init(config, first.input.shape(), dim, seed)?;
        Ok(GanTrainer {
            model,
            samples,
            adam_g: Adam::new(config.adam_g),
            adam_d: Adam::new(config.adam_d),
            sampler: Sampler {
                order: (0..samples.len()).collect(),
                pos: samples.len(),
                rng: rng::stream(seed, &[rng::label("pfsm-batches")]),
            },
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        self.sampler.next(self.model.config.batch_size)
    }

    /// Discriminator sees `[real; fake]` in one batch; returns the tape with
    /// both halves' outputs.
    fn forward(&self, batch: &[usize], train_g: bool, train_d: bool) -> Result<(Forward, Scope<'_>, Scope<'_>)> {
        let m = &self.model;
        let mut tape = Tape::new();
        let mut gs = Scope::bind(&mut tape, &m.generator.params, train_g, Mode::Train);
        let mut ds = Scope::bind(&mut tape, &m.discriminator.params, train_d, Mode::Train);
        let inputs: Vec<Tensor> = batch.iter().map(|&i| self.samples[i].input.clone()).collect();
        let labels: Vec<f64> = batch.iter().map(|&i| self.samples[i].label as f64).collect();
        let fake = m.generator.forward(&mut tape, &mut gs, &inputs, &labels)?;
        let real_data: Vec<f64> = batch
            .iter()
            .flat_map(|&i| self.samples[i].target.iter().copied())
            .collect();
        let real = tape.constant(Tensor::new(vec![batch.len(), m.feature_dim], real_data)?);
        let both = tape.concat(&[real, fake], 0)?;
        let (y1, y2) = m.discriminator.forward(&mut tape, &mut ds, both)?;
        Ok((Forward { tape, y1, y2, labels }, gs, ds))
    }

    fn split(tape: &mut Tape, y: Var, n: usize) -> Result<(Var, Var)> {
        Ok((tape.slice(y, 0, 0, n)?, tape.slice(y, 0, n, n)?))
    }

    fn accuracies(tape: &Tape, y1: Var, y2: Var, labels: &[f64]) -> (f64, f64) {
        let n = labels.len();
        let p1 = tape.value(y1).data();
        let p2 = tape.value(y2).data();
        let src = (0..2 * n).filter(|&i| (p1[i] >= 0.5) == (i < n)).count();
        let cls = (0..n).filter(|&i| (p2[i] >= 0.5) as u8 as f64 == labels[i]).count();
        (src as f64 / (2 * n) as f64, cls as f64 / n as f64)
    }

    /// Discriminator loss on a batch without updating anything.
    pub fn d_loss(&self, batch: &[usize]) -> Result<f64> {
        let (mut f, _, _) = self.forward(batch, false, false)?;
        let n = batch.len();
        let (y1r, y1f) = Self::split(&mut f.tape, f.y1, n)?;
        let (y2r, y2f) = Self::split(&mut f.tape, f.y2, n)?;
        let loss = gan_d_loss(&mut f.tape, y1r, y1f, y2r, y2f, &f.labels)?;
        Ok(f.tape.value(loss.total).item())
    }

    pub fn d_step(&mut self, batch: &[usize]) -> Result<StepReport> {
        let (mut f, _gs, mut ds) = self.forward(batch, false, true)?;
        let n = batch.len();
        let (y1r, y1f) = Self::split(&mut f.tape, f.y1, n)?;
        let (y2r, y2f) = Self::split(&mut f.tape, f.y2, n)?;
        let loss = gan_d_loss(&mut f.tape, y1r, y1f, y2r, y2f, &f.labels)?;
        let value = f.tape.value(loss.total).item();
        if !value.is_finite() {
            return Err(Error::non_finite("discriminator loss"));
        }
        let (acc_source, acc_class) = Self::accuracies(&f.tape, f.y1, f.y2, &f.labels);
        f.tape.backward(loss.total)?;
        let grads = ds.grads(&f.tape);
        let stats = ds.take_batch_stats();
        drop(ds);
        self.adam_d.step(&mut self.model.discriminator.params, &grads)?;
        self.model
            .discriminator
            .params
            .apply_batch_stats(&stats, self.model.config.bn_momentum)?;
        Ok(StepReport {
            loss: value,
            acc_source,
            acc_class,
            touched: grads.into_keys().collect(),
        })
    }

    pub fn g_step(&mut self, batch: &[usize]) -> Result<StepReport> {
        let (mut f, mut gs, _ds) = self.forward(batch, true, false)?;
        let n = batch.len();
        let (_, y1f) = Self::split(&mut f.tape, f.y1, n)?;
        let (_, y2f) = Self::split(&mut f.tape, f.y2, n)?;
        let loss = gan_g_loss(&mut f.tape, y1f, y2f, &f.labels, self.model.config.g_loss)?;
        let value = f.tape.value(loss.total).item();
        if !value.is_finite() {
            return Err(Error::non_finite("generator loss"));
        }
        let (acc_source, acc_class) = Self::accuracies(&f.tape, f.y1, f.y2, &f.labels);
        f.tape.backward(loss.total)?;
        let grads = gs.grads(&f.tape);
        let stats = gs.take_batch_stats();
        drop(gs);
        self.adam_g.step(&mut self.model.generator.params, &grads)?;
        self.model
            .generator
            .params
            .apply_batch_stats(&stats, self.model.config.bn_momentum)?;
        Ok(StepReport {
            loss: value,
            acc_source,
            acc_class,
            touched: grads.into_keys().collect(),
        })
    }

    /// One outer iteration: `k_d` discriminator updates, then one generator update.
    pub fn step(&mut self, step: usize) -> Result<StepLog> {
        let annotate = |e: Error| match e {
            Error::NonFinite { context } => Error::non_finite(format!("{context} at step {step}")),
            other => other,
        };
        let mut last_d = None;
        for _ in 0..self.model.config.k_d {
            let batch = self.next_batch();
            last_d = Some(self.d_step(&batch).map_err(annotate)?);
        }
        let batch = self.next_batch();
        let g = self.g_step(&batch).map_err(annotate)?;
        let d = last_d.as_ref();
        Ok(StepLog {
            step,
            loss_d: d.map_or(f64::NAN, |d| d.loss),
            loss_g: g.loss,
            acc_source: d.map_or(g.acc_source, |d| d.acc_source),
            acc_class: d.map_or(g.acc_class, |d| d.acc_class),
        })
    }

    pub fn finish(mut self) -> PfsmModel {
        self.model.trained = true;
        self.model
    }
}

/// Trains generator and discriminator on prepared samples.
pub fn train_gan(samples: &[GanSample], config: &PfsmConfig, seed: u64) -> Result<(PfsmModel, Vec<StepLog>)> {
    let mut trainer = GanTrainer::new(samples, config, seed)?;
    let log = (0..config.steps)
        .map(|s| trainer.step(s))
        .collect::<Result<Vec<_>>>()?;
    Ok((trainer.finish(), log))
}

/// Builds GAN samples from subjects and their cached real features.
pub fn gan_samples(subjects: &[&Subject], cache: &FeatureCache, prep: &VolumePrep) -> Result<Vec<GanSample>> {
    subjects
        .iter()
        .map(|s| {
            Ok(GanSample {
                input: prep.apply(s)?,
                label: s.label,
                target: cache.get(s.id)?.to_vec(),
            })
        })
        .collect()
}

/// Trains the synthesis module on subjects whose real features are cached.
pub fn train_pfsm(
    subjects: &[&Subject],
    cache: &FeatureCache,
    prep: &VolumePrep,
    config: &PfsmConfig,
    seed: u64,
) -> Result<(PfsmModel, Vec<StepLog>)> {
    let mut samples = gan_samples(subjects, cache, prep)?;
    let scale = if config.standardize_targets {
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.target.as_slice()).collect();
        let scale = FeatureScale::fit(&rows)?;
        for s in samples.iter_mut() {
            s.target = scale.apply(&s.target);
        }
        Some(scale)
    } else {
        None
    };
    let (mut model, log) = train_gan(&samples, config, seed)?;
    model.scale = scale;
    Ok((model, log))
}

impl PfsmModel {
    /// A real feature vector expressed in the space the generator was trained on.
    pub fn target_space(&self, real: &[f64]) -> Vec<f64> {
        match &self.scale {
            Some(s) => s.apply(real),
            None => real.to_vec(),
        }
    }
}

/// Generator output for one prepared `[1, D, H, W]` volume, eval mode.
pub fn generator_forward(model: &PfsmModel, volume: &Tensor, c: f64) -> Result<FeatureVector> {
    let mut tape = Tape::new();
    let mut scope = Scope::bind(&mut tape, &model.generator.params, false, Mode::Eval);
    let f = model
        .generator
        .forward(&mut tape, &mut scope, std::slice::from_ref(volume), &[c])?;
    Ok(FeatureVector {
        values: tape.value(f).data().to_vec(),
        source: FeatureSource::Synthesized,
    })
}

/// Discriminator outputs `(y1, y2)` for one feature vector, eval mode.
pub fn discriminator_forward(model: &PfsmModel, x: &[f64]) -> Result<(f64, f64)> {
    let d = &model.discriminator;
    if x.len() != d.input_dim {
        return Err(Error::shape(format!(
            "discriminator expects {} features, got {}",
            d.input_dim,
            x.len()
        )));
    }
    let mut tape = Tape::new();
    let mut scope = Scope::bind(&mut tape, &d.params, false, Mode::Eval);
    let v = tape.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let (y1, y2) = d.forward(&mut tape, &mut scope, v)?;
    Ok((tape.value(y1).item(), tape.value(y2).item()))
}

/// Synthesized feature for a subject under conditioning value `c`.
pub fn synthesize_feature(subject: &Subject, model: &PfsmModel, prep: &VolumePrep, c: f64) -> Result<FeatureVector> {
    if !model.trained {
        return Err(Error::Config("synthesis module has not been trained".into()));
    }
    generator_forward(model, &prep.apply(subject)?, c)
}

/// Eval-mode discriminator accuracies on fresh samples: real/fake accuracy
/// over both halves and class accuracy on the real half.
pub fn evaluate_discriminator(model: &PfsmModel, samples: &[GanSample]) -> Result<(f64, f64)> {
    let (mut src, mut cls) = (0usize, 0usize);
    for s in samples {
        let fake = generator_forward(model, &s.input, s.label as f64)?;
        let (y1r, y2r) = discriminator_forward(model, &s.target)?;
        let (y1f, _) = discriminator_forward(model, &fake.values)?;
        src += (y1r >= 0.5) as usize + (y1f < 0.5) as usize;
        cls += ((y2r >= 0.5) as u8 == s.label) as usize;
    }
    let n = samples.len() as f64;
    Ok((src as f64 / (2.0 * n), cls as f64 / n))
}

pub fn write_log_csv(log: &[StepLog], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,loss_d,loss_g,acc_source,acc_class").expect("in-memory write");
    for e in log {
        writeln!(
            out,
            "{},{},{},{},{}",
            e.step, e.loss_d, e.loss_g, e.acc_source, e.acc_class
        )
        .expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
