//! Fusion classifier: radiological encoder(s), an optional frozen feature
//! generator, and a dense head over the concatenated features.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Subject;
use crate::encoder::{EncoderConfig, VolumeEncoder, VolumePrep};
use crate::error::{Error, Result};
use crate::nn::{Dense, Mode, ParamStore, Scope};
use crate::optim::{bce_loss, Adam, AdamConfig};
use crate::pfe::{check_same_layout, EpochLog};
use crate::pfsm::Generator;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Radiological encoder plus frozen synthesized pathological features.
    Sghf,
    /// Radiological encoder only.
    BenchmarkRf,
    /// Frozen synthesized features only.
    SpfOnly,
    /// Two radiological encoders, fused like `Sghf`.
    DoubleRf,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Sghf, Variant::BenchmarkRf, Variant::SpfOnly, Variant::DoubleRf];

    pub fn needs_generator(self) -> bool {
        matches!(self, Variant::Sghf | Variant::SpfOnly)
    }

    pub fn encoders(self) -> usize {
        match self {
            Variant::Sghf | Variant::BenchmarkRf => 1,
            Variant::SpfOnly => 0,
            Variant::DoubleRf => 2,
        }
    }

    fn fused(self) -> bool {
        matches!(self, Variant::Sghf | Variant::DoubleRf)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Sghf => "sghf",
            Variant::BenchmarkRf => "benchmark-rf",
            Variant::SpfOnly => "spf-only",
            Variant::DoubleRf => "double-rf",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Conditioning value fed to the frozen generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// `c = 0.5` for every subject, in training and at test time.
    #[default]
    Neutral,
    /// The subject's true label, also at test time.
    TrueLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SghfConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub bn_momentum: f64,
    pub label_mode: LabelMode,
    /// Weights of the radiological and pathological losses. Only the
    /// radiological term is optimised here; the synthesis module is pre-trained.
    pub lambda_r: f64,
    pub lambda_p: f64,
}

impl Default for SghfConfig {
    fn default() -> Self {
        SghfConfig {
            encoder: EncoderConfig::default(),
            epochs: 50,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            bn_momentum: 0.1,
            label_mode: LabelMode::Neutral,
            lambda_r: 1.0,
            lambda_p: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
enum Head {
    Fused { hidden: Dense, out: Dense },
    Single { out: Dense },
}

#[derive(Clone, Debug)]
pub struct SghfModel {
    pub variant: Variant,
    pub config: SghfConfig,
    /// Trainable part: encoders and head.
    pub params: ParamStore,
    /// Frozen generator, present iff the variant uses synthesized features.
    pub generator: Option<Generator>,
    pub input_shape: Vec<usize>,
    encoders: Vec<VolumeEncoder>,
    head: Head,
}

fn encoder_name(i: usize) -> String {
    if i == 0 {
        "rfem".into()
    } else {
        format!("rfem{}", i + 1)
    }
}

/// Assembles a variant. `generator` is required exactly for the variants
/// that use synthesized features and ignored otherwise.
pub fn build_model(
    variant: Variant,
    config: &SghfConfig,
    input_shape: &[usize],
    generator: Option<Generator>,
    seed: u64,
) -> Result<SghfModel> {
    if input_shape.len() != 4 || input_shape[0] != 1 {
        return Err(Error::shape(format!("expected [1, D, H, W] inputs, got {input_shape:?}")));
    }
    let generator = match (variant.needs_generator(), generator) {
        (true, None) => {
            return Err(Error::Config(format!("variant {variant} needs a trained generator")));
        }
        (true, Some(g)) => {
            if g.input_shape != input_shape {
                return Err(Error::Config(format!(
                    "generator was trained on {:?} volumes, model expects {input_shape:?}",
                    g.input_shape
                )));
            }
            Some(g)
        }
        (false, _) => None,
    };
    let mut r = rng::stream(seed, &[rng::label("sghf-init"), variant as u64]);
    let mut params = ParamStore::new();
    let dims = [input_shape[1], input_shape[2], input_shape[3]];
    let f = config.encoder.feature_dim;
    let encoders = (0..variant.encoders())
        .map(|i| VolumeEncoder::init(&mut params, &encoder_name(i), &config.encoder, 1, dims, &mut r))
        .collect::<Result<Vec<_>>>()?;
    let width = encoders.len() * f + generator.as_ref().map_or(0, Generator::feature_dim);
    let head = if variant.fused() {
        Head::Fused {
            hidden: Dense::init(&mut params, "fuse.hidden", width, f, &mut r),
            out: Dense::init(&mut params, "fuse.out", f, 1, &mut r),
        }
    } else {
        Head::Single {
            out: Dense::init(&mut params, "head.out", width, 1, &mut r),
        }
    };
    Ok(SghfModel {
        variant,
        config: config.clone(),
        params,
        generator,
        input_shape: input_shape.to_vec(),
        encoders,
        head,
    })
}

impl SghfModel {
    pub fn conditioning(&self, label: u8) -> f64 {
        match self.config.label_mode {
            LabelMode::Neutral => 0.5,
            LabelMode::TrueLabel => label as f64,
        }
    }

    /// Width of the concatenated feature entering the head.
    pub fn fusion_width(&self) -> usize {
        self.encoders.len() * self.config.encoder.feature_dim
            + self.generator.as_ref().map_or(0, Generator::feature_dim)
    }

    pub fn num_trainable(&self) -> usize {
        self.params.num_trainable()
    }

    /// Trainable scalars inside the radiological encoders.
    pub fn num_encoder_params(&self) -> usize {
        self.params
            .trainable()
            .filter(|(n, _)| n.starts_with("rfem"))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Concatenated features `[B, width]` in the order `[f_p, f_r...]`.
    pub fn features(
        &self,
        tape: &mut Tape,
        scope: &mut Scope,
        gen_scope: Option<&mut Scope>,
        volumes: &[Tensor],
        c: &[f64],
    ) -> Result<Var> {
        let mut parts = Vec::new();
        if let Some(g) = &self.generator {
            let gs = gen_scope.ok_or_else(|| Error::Config("generator scope not bound".into()))?;
            parts.push(g.forward(tape, gs, volumes, c)?);
        }
        for enc in &self.encoders {
            parts.push(enc.forward(tape, scope, volumes)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(&parts, 1)
        }
    }

    /// Class-1 probabilities `[B, 1]` from concatenated features.
    pub fn head_forward(&self, tape: &mut Tape, scope: &Scope, fused: Var) -> Result<Var> {
        let logits = match &self.head {
            Head::Fused { hidden, out } => {
                let h = hidden.forward(tape, scope, fused)?;
                let h = tape.relu(h);
                out.forward(tape, scope, h)?
            }
            Head::Single { out } => out.forward(tape, scope, fused)?,
        };
        Ok(tape.sigmoid(logits))
    }

    /// Eval-mode probabilities for prepared volumes. `zero_generated` replaces
    /// the synthesized branch by zeros (perturbation checks).
    pub fn probabilities(&self, volumes: &[Tensor], labels: &[u8], zero_generated: bool) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut scope = Scope::bind(&mut tape, &self.params, false, Mode::Eval);
        let mut gs = self
            .generator
            .as_ref()
            .map(|g| Scope::bind(&mut tape, &g.params, false, Mode::Eval));
        let c: Vec<f64> = labels.iter().map(|&l| self.conditioning(l)).collect();
        let mut fused = self.features(&mut tape, &mut scope, gs.as_mut(), volumes, &c)?;
        if zero_generated {
            if let Some(g) = &self.generator {
                let fp = g.feature_dim();
                let zeros = tape.constant(Tensor::zeros(&[volumes.len(), fp]));
                let width = self.fusion_width();
                let rest = if width > fp {
                    vec![zeros, tape.slice(fused, 1, fp, width - fp)?]
                } else {
                    vec![zeros]
                };
                fused = if rest.len() == 1 { rest[0] } else { tape.concat(&rest, 1)? };
            }
        }
        let p = self.head_forward(&mut tape, &scope, fused)?;
        Ok(tape.value(p).data().to_vec())
    }
}

/// Gradient bookkeeping for one optimisation step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepAudit {
    pub epoch: usize,
    pub step: usize,
    /// Frozen generator parameters that received a gradient (must be 0).
    pub frozen_with_grad: usize,
    /// Trainable parameters with a nonzero gradient (must be positive).
    pub trainable_with_grad: usize,
}

/// Trains the encoders and head with the radiological loss. The generator,
/// if any, is bound as constants in eval mode; its parameters are checked to
/// be bit-identical afterwards and the gradient partition is checked on every
/// step. `on_step` observes each step's audit.
pub fn train_sghf_audited(
    mut model: SghfModel,
    subjects: &[&Subject],
    prep: &VolumePrep,
    seed: u64,
    mut on_step: impl FnMut(&StepAudit),
) -> Result<(SghfModel, Vec<EpochLog>)> {
    let cfg = model.config.clone();
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2 for batch norm".into()));
    }
    if subjects.len() < 2 {
        return Err(Error::Data("need at least 2 training subjects".into()));
    }
    let volumes = subjects.iter().map(|s| prep.apply(s)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = subjects.iter().map(|s| s.label).collect();
    let frozen = model.generator.as_ref().map(|g| g.params.to_bytes());
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(seed, &[rng::label("sghf-epoch"), epoch as u64]));
        let mut batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            let tail = batches.pop().unwrap_or_default();
            batches.last_mut().expect("at least one batch").extend(tail);
        }
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in &batches {
            let bv: Vec<Tensor> = batch.iter().map(|&i| volumes[i].clone()).collect();
            let by: Vec<f64> = batch.iter().map(|&i| labels[i] as f64).collect();
            let c: Vec<f64> = batch.iter().map(|&i| model.conditioning(labels[i])).collect();
            let mut tape = Tape::new();
            let mut scope = Scope::bind(&mut tape, &model.params, true, Mode::Train);
            let mut gs = model
                .generator
                .as_ref()
                .map(|g| Scope::bind(&mut tape, &g.params, false, Mode::Eval));
            let fused = model.features(&mut tape, &mut scope, gs.as_mut(), &bv, &c)?;
            let p = model.head_forward(&mut tape, &scope, fused)?;
            let bce = bce_loss(&mut tape, p, &by)?;
            let loss = tape.scale(bce, cfg.lambda_r);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::non_finite(format!("fusion loss at epoch {epoch}")));
            }
            for (&pi, &yi) in tape.value(p).data().iter().zip(&by) {
                correct += ((pi >= 0.5) as u8 as f64 == yi) as usize;
            }
            loss_sum += value * batch.len() as f64;
            tape.backward(loss)?;

            let audit = StepAudit {
                epoch,
                step,
                frozen_with_grad: gs
                    .as_ref()
                    .map_or(0, |g| g.vars().filter(|(_, v)| tape.grad(*v).is_some()).count()),
                trainable_with_grad: scope
                    .vars()
                    .filter(|(_, v)| tape.grad(*v).is_some_and(|g| g.data().iter().any(|&x| x != 0.0)))
                    .count(),
            };
            on_step(&audit);
            if audit.frozen_with_grad > 0 || audit.trainable_with_grad == 0 {
                return Err(Error::Invariant(format!(
                    "gradient partition broken at step {step}: {} frozen and {} trainable parameters have gradients",
                    audit.frozen_with_grad, audit.trainable_with_grad
                )));
            }
            let grads = scope.grads(&tape);
            let stats = scope.take_batch_stats();
            drop(scope);
            drop(gs);
            adam.step(&mut model.params, &grads)?;
            model.params.apply_batch_stats(&stats, cfg.bn_momentum)?;
            step += 1;
        }
        log.push(EpochLog {
            epoch,
            loss: loss_sum / subjects.len() as f64,
            accuracy: correct as f64 / subjects.len() as f64,
        });
    }
    if model.generator.as_ref().map(|g| g.params.to_bytes()) != frozen {
        return Err(Error::Invariant("frozen generator parameters changed".into()));
    }
    Ok((model, log))
}

pub fn train_sghf(
    model: SghfModel,
    subjects: &[&Subject],
    prep: &VolumePrep,
    seed: u64,
) -> Result<(SghfModel, Vec<EpochLog>)> {
    train_sghf_audited(model, subjects, prep, seed, |_| {})
}

/// Probability of class 1 and the hard label (`p >= 0.5` is class 1).
pub fn predict(model: &SghfModel, subject: &Subject, prep: &VolumePrep) -> Result<(f64, u8)> {
    let p = model.probabilities(&[prep.apply(subject)?], &[subject.label], false)?[0];
    Ok((p, hard_label(p)))
}

pub fn hard_label(p: f64) -> u8 {
    (p >= 0.5) as u8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: u64,
    pub p: f64,
    pub label: u8,
    pub truth: u8,
}

/// Per-subject eval-mode predictions, in input order.
pub fn predict_all(model: &SghfModel, subjects: &[&Subject], prep: &VolumePrep) -> Result<Vec<Prediction>> {
    subjects
        .iter()
        .map(|s| {
            let (p, label) = predict(model, s, prep)?;
            Ok(Prediction {
                id: s.id,
                p,
                label,
                truth: s.label,
            })
        })
        .collect()
}

pub fn write_predictions_csv(preds: &[Prediction], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "subject_id,p,label,truth").expect("in-memory write");
    for p in preds {
        writeln!(out, "{},{},{},{}", p.id, p.p, p.label, p.truth).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Serialized model: variant tag, configuration and every parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub variant: Variant,
    pub config: SghfConfig,
    pub input_shape: Vec<usize>,
    pub generator_config: Option<EncoderConfig>,
    pub generator: Option<ParamStore>,
    pub params: ParamStore,
}

const CHECKPOINT_FORMAT: &str = "sghf-model/1";

impl Checkpoint {
    pub fn of(model: &SghfModel, generator_config: Option<&EncoderConfig>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            variant: model.variant,
            config: model.config.clone(),
            input_shape: model.input_shape.clone(),
            generator_config: model.generator.as_ref().and(generator_config.cloned()),
            generator: model.generator.as_ref().map(|g| g.params.clone()),
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<SghfModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {:?}", self.format)));
        }
        let generator = match (self.generator_config, self.generator) {
            (Some(cfg), Some(params)) => Some(Generator::from_params(&cfg, &self.input_shape, params)?),
            (None, None) => None,
            _ => return Err(Error::Config("checkpoint has a partial generator".into())),
        };
        let mut model = build_model(self.variant, &self.config, &self.input_shape, generator, 0)?;
        check_same_layout(&model.params, &self.params, "model")?;
        model.params = self.params;
        Ok(model)
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
