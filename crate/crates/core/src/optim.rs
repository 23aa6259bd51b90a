//! Adam and the scalar training losses.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamStore};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a [`ParamStore`]. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }

    /// Applies one update. Gradients are validated before anything is
    /// modified, so a rejected step leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::non_finite(format!("gradient of `{name}`")));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient of `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (name, g) in grads {
            let n = g.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let p = params.get_mut(name)?;
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy; see [`Tape::bce`] for the clamping rule.
pub fn bce_loss(tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var> {
    tape.bce(probs, labels)
}

/// Discriminator objective split into its source (real/fake) and class parts.
#[derive(Clone, Copy, Debug)]
pub struct GanLoss {
    pub total: Var,
    pub source: Var,
    pub class: Var,
}

/// Discriminator loss in minimization form:
/// `-[mean log y1_real + mean log(1 - y1_fake)] + BCE(y2_real, c) + BCE(y2_fake, c)`.
pub fn gan_d_loss(
    tape: &mut Tape,
    y1_real: Var,
    y1_fake: Var,
    y2_real: Var,
    y2_fake: Var,
    labels: &[f64],
) -> Result<GanLoss> {
    let ones = vec![1.0; tape.value(y1_real).numel()];
    let zeros = vec![0.0; tape.value(y1_fake).numel()];
    let real = tape.bce(y1_real, &ones)?;
    let fake = tape.bce(y1_fake, &zeros)?;
    let source = tape.add(real, fake)?;
    let cls_real = tape.bce(y2_real, labels)?;
    let cls_fake = tape.bce(y2_fake, labels)?;
    let class = tape.add(cls_real, cls_fake)?;
    let total = tape.add(source, class)?;
    Ok(GanLoss {
        total,
        source,
        class,
    })
}

/// Source term used for the generator update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorLoss {
    /// `mean log(1 - D(G(z)))`, minimized.
    Saturating,
    /// `-mean log D(G(z))`.
    #[default]
    NonSaturating,
}

impl FromStr for GeneratorLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saturating" => Ok(GeneratorLoss::Saturating),
            "non-saturating" => Ok(GeneratorLoss::NonSaturating),
            other => Err(Error::Config(format!("unknown generator loss mode `{other}`"))),
        }
    }
}

/// Generator loss: source term per `mode` plus `BCE(y2_fake, c)`.
pub fn gan_g_loss(
    tape: &mut Tape,
    y1_fake: Var,
    y2_fake: Var,
    labels: &[f64],
    mode: GeneratorLoss,
) -> Result<GanLoss> {
    let n = tape.value(y1_fake).numel();
    let source = match mode {
        GeneratorLoss::Saturating => {
            let b = tape.bce(y1_fake, &vec![0.0; n])?;
            tape.scale(b, -1.0)
        }
        GeneratorLoss::NonSaturating => tape.bce(y1_fake, &vec![1.0; n])?,
    };
    let class = tape.bce(y2_fake, labels)?;
    let total = tape.add(source, class)?;
    Ok(GanLoss {
        total,
        source,
        class,
    })
}
