//! Volume encoders shared by the radiological branch and the generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_voi, dilate_mask, normalize_unit, Subject};
use crate::error::{Error, Result};
use crate::nn::{volume_tokens, Backbone, CnnConfig, CnnDepth, CnnEncoder, ParamStore, Scope, VitConfig, VitEncoder};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub feature_dim: usize,
    /// CNN stem width.
    pub base_width: usize,
    pub vit_heads: usize,
    pub vit_d_k: usize,
    pub vit_depth: usize,
    pub vit_mlp_hidden: usize,
    /// Edge of the cubic cells that become transformer tokens.
    pub vit_cell: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backbone: Backbone::CnnSmall,
            feature_dim: 16,
            base_width: 4,
            vit_heads: 2,
            vit_d_k: 8,
            vit_depth: 1,
            vit_mlp_hidden: 32,
            vit_cell: 4,
        }
    }
}

/// Encoder over `[C, D, H, W]` volumes producing `[B, F]` features.
#[derive(Clone, Debug)]
pub enum VolumeEncoder {
    Cnn(CnnEncoder),
    Vit { encoder: VitEncoder, cell: usize },
}

impl VolumeEncoder {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        in_channels: usize,
        volume_shape: [usize; 3],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        match cfg.backbone {
            Backbone::CnnSmall | Backbone::CnnMedium => {
                let depth = if cfg.backbone == Backbone::CnnSmall {
                    CnnDepth::Small
                } else {
                    CnnDepth::Medium
                };
                let c = CnnConfig {
                    depth,
                    in_channels,
                    spatial_rank: 3,
                    base_width: cfg.base_width,
                    feature_dim: cfg.feature_dim,
                };
                Ok(VolumeEncoder::Cnn(CnnEncoder::init(store, name, &c, rng)?))
            }
            Backbone::Vit => {
                let cell = cfg.vit_cell;
                if cell == 0 || volume_shape.iter().any(|&d| d < cell) {
                    return Err(Error::Config(format!(
                        "token cell {cell} does not fit volume {volume_shape:?}"
                    )));
                }
                let n_tokens: usize = volume_shape.iter().map(|d| d / cell).product();
                let c = VitConfig {
                    token_dim: in_channels * cell * cell * cell,
                    heads: cfg.vit_heads,
                    d_k: cfg.vit_d_k,
                    depth: cfg.vit_depth,
                    mlp_hidden: cfg.vit_mlp_hidden,
                    max_tokens: n_tokens,
                    position_embeddings: true,
                    feature_dim: cfg.feature_dim,
                };
                Ok(VolumeEncoder::Vit {
                    encoder: VitEncoder::init(store, name, &c, rng)?,
                    cell,
                })
            }
        }
    }

    /// Encodes a batch of `[C, D, H, W]` volumes to `[B, F]`.
    pub fn forward(&self, tape: &mut Tape, scope: &mut Scope, volumes: &[Tensor]) -> Result<Var> {
        let first = volumes.first().ok_or(Error::Empty("volume batch"))?;
        match self {
            VolumeEncoder::Cnn(enc) => {
                let mut shape = vec![volumes.len()];
                shape.extend_from_slice(first.shape());
                let mut data = Vec::with_capacity(first.numel() * volumes.len());
                for v in volumes {
                    if v.shape() != first.shape() {
                        return Err(Error::shape("volumes in a batch differ in shape"));
                    }
                    data.extend_from_slice(v.data());
                }
                let x = tape.constant(Tensor::new(shape, data)?);
                enc.forward(tape, scope, x)
            }
            VolumeEncoder::Vit { encoder, cell } => {
                let tokens = volumes
                    .iter()
                    .map(|v| volume_tokens(v, *cell))
                    .collect::<Result<Vec<_>>>()?;
                encoder.forward_batch(tape, scope, &tokens)
            }
        }
    }
}

/// Preprocessing geometry for volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumePrep {
    /// Crop extent as `[depth, height, width]`.
    pub voi: [usize; 3],
    pub dilation: usize,
}

impl Default for VolumePrep {
    fn default() -> Self {
        VolumePrep {
            voi: [8, 16, 16],
            dilation: 3,
        }
    }
}

impl VolumePrep {
    pub fn apply(&self, subject: &Subject) -> Result<Tensor> {
        prepare_volume(subject, self.voi, self.dilation)
    }
}

/// Volume preprocessing: mask dilated by `dilation` voxels, volume restricted
/// to it, cropped to `voi` around the mask and scaled to `[0, 1]`.
/// Returns a single-channel `[1, D, H, W]` tensor.
pub fn prepare_volume(subject: &Subject, voi: [usize; 3], dilation: usize) -> Result<Tensor> {
    let mask = dilate_mask(&subject.mask, dilation);
    let masked: Vec<f64> = subject
        .volume
        .data()
        .iter()
        .zip(&mask.data)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    let masked = Tensor::new(subject.volume.shape().to_vec(), masked)?;
    let crop = crop_voi(&masked, &mask, &voi)?;
    let mut shape = vec![1];
    shape.extend_from_slice(&voi);
    Tensor::new(shape, normalize_unit(crop.data()))
}

/// Appends a constant channel valued `c` to a `[1, D, H, W]` volume.
pub fn with_label_channel(volume: &Tensor, c: f64) -> Result<Tensor> {
    let s = volume.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::shape(format!("expected [1, D, H, W], got {s:?}")));
    }
    let mut data = volume.data().to_vec();
    data.extend(std::iter::repeat(c).take(volume.numel()));
    Tensor::new(vec![2, s[1], s[2], s[3]], data)
}
