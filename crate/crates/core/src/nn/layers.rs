use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Mode, ParamStore, Scope};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) const BN_EPS: f64 = 1e-5;

/// Fan-in scaled normal init, std = sqrt(2 / fan_in).
pub(crate) fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("shape matches")
}

/// Affine map `x W + b` over `[B, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn init(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        store.add_weight(format!("{name}.weight"), he_normal(&[inputs, outputs], inputs, rng));
        store.add_weight(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Dense {
            name: name.to_string(),
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, scope: &Scope, x: Var) -> Result<Var> {
        let w = scope.param(&format!("{}.weight", self.name))?;
        let b = scope.param(&format!("{}.bias", self.name))?;
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.inputs {
            return Err(Error::shape(format!(
                "{}: expected [B, {}], got {s:?}",
                self.name, self.inputs
            )));
        }
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Bias-free convolution (a batch norm always follows).
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// `kernel` is the per-axis extent; `spatial_rank` is 2 or 3.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spatial_rank: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut shape = vec![out_channels, in_channels];
        shape.extend(std::iter::repeat_n(kernel, spatial_rank));
        let fan_in = in_channels * kernel.pow(spatial_rank as u32);
        store.add_weight(format!("{name}.weight"), he_normal(&shape, fan_in, rng));
        Conv {
            name: name.to_string(),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, scope: &Scope, x: Var) -> Result<Var> {
        let k = scope.param(&format!("{}.weight", self.name))?;
        tape.conv(x, k, self.stride, self.padding)
    }
}

/// Per-channel batch normalization over `[B, C, ...]` with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
}

impl BatchNorm {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        store.add_weight(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        store.add_weight(format!("{name}.beta"), Tensor::zeros(&[channels]));
        store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0));
        BatchNorm {
            name: name.to_string(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, scope: &mut Scope, x: Var) -> Result<Var> {
        let n = &self.name;
        let gamma = scope.param(&format!("{n}.gamma"))?;
        let beta = scope.param(&format!("{n}.beta"))?;
        match scope.mode() {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, BN_EPS)?;
                scope.record_stats(n, stats);
                Ok(y)
            }
            Mode::Eval => {
                let mean = scope.buffer(&format!("{n}.running_mean"))?;
                let var = scope.buffer(&format!("{n}.running_var"))?;
                tape.batch_norm_fixed(x, gamma, beta, mean.data(), var.data(), BN_EPS)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        store.add_weight(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        store.add_weight(format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNorm {
            name: name.to_string(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, scope: &Scope, x: Var) -> Result<Var> {
        let gamma = scope.param(&format!("{}.gamma", self.name))?;
        let beta = scope.param(&format!("{}.beta", self.name))?;
        tape.layer_norm(x, gamma, beta, BN_EPS)
    }
}
