use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BatchNorm, Conv, Dense, ParamStore, Scope};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Residual depth family: `Small` has two stages, `Medium` four.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CnnDepth {
    Small,
    Medium,
}

impl CnnDepth {
    /// (width multiplier, stride) per stage.
    fn stages(self) -> &'static [(usize, usize)] {
        match self {
            CnnDepth::Small => &[(1, 1), (2, 2)],
            CnnDepth::Medium => &[(1, 1), (2, 2), (4, 2), (4, 2)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub depth: CnnDepth,
    pub in_channels: usize,
    /// 2 for patches, 3 for volumes.
    pub spatial_rank: usize,
    pub base_width: usize,
    pub feature_dim: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl ResBlock {
    fn forward(&self, tape: &mut Tape, scope: &mut Scope, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, scope, x)?;
        let h = self.bn1.forward(tape, scope, h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, scope, h)?;
        let h = self.bn2.forward(tape, scope, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, scope, x)?;
                bn.forward(tape, scope, s)?
            }
            None => x,
        };
        let sum = tape.add(h, skip)?;
        Ok(tape.relu(sum))
    }
}

/// Residual CNN: strided stem, residual stages, global average pool, dense to `F`.
#[derive(Clone, Debug)]
pub struct CnnEncoder {
    pub config: CnnConfig,
    stem: Conv,
    stem_bn: BatchNorm,
    blocks: Vec<ResBlock>,
    head: Dense,
}

impl CnnEncoder {
    pub fn init(store: &mut ParamStore, name: &str, config: &CnnConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = config;
        if c.feature_dim == 0 || c.base_width == 0 || c.in_channels == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if !(c.spatial_rank == 2 || c.spatial_rank == 3) {
            return Err(Error::Config(format!("spatial rank {} not supported", c.spatial_rank)));
        }
        let r = c.spatial_rank;
        let stem = Conv::init(store, &format!("{name}.stem"), c.in_channels, c.base_width, 3, r, 2, 1, rng);
        let stem_bn = BatchNorm::init(store, &format!("{name}.stem_bn"), c.base_width);
        let mut width = c.base_width;
        let mut blocks = Vec::new();
        for (i, &(mult, stride)) in c.depth.stages().iter().enumerate() {
            let out = c.base_width * mult;
            let p = format!("{name}.stage{i}");
            let shortcut = (stride != 1 || out != width).then(|| {
                (
                    Conv::init(store, &format!("{p}.proj"), width, out, 1, r, stride, 0, rng),
                    BatchNorm::init(store, &format!("{p}.proj_bn"), out),
                )
            });
            blocks.push(ResBlock {
                conv1: Conv::init(store, &format!("{p}.conv1"), width, out, 3, r, stride, 1, rng),
                bn1: BatchNorm::init(store, &format!("{p}.bn1"), out),
                conv2: Conv::init(store, &format!("{p}.conv2"), out, out, 3, r, 1, 1, rng),
                bn2: BatchNorm::init(store, &format!("{p}.bn2"), out),
                shortcut,
            });
            width = out;
        }
        let head = Dense::init(store, &format!("{name}.head"), width, c.feature_dim, rng);
        Ok(CnnEncoder {
            config: config.clone(),
            stem,
            stem_bn,
            blocks,
            head,
        })
    }

    /// `[B, C_in, spatial...] -> [B, F]`.
    pub fn forward(&self, tape: &mut Tape, scope: &mut Scope, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != self.config.spatial_rank + 2 || s[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "encoder expects [B, {}, {}-D], got {s:?}",
                self.config.in_channels, self.config.spatial_rank
            )));
        }
        let h = self.stem.forward(tape, scope, x)?;
        let h = self.stem_bn.forward(tape, scope, h)?;
        let mut h = tape.relu(h);
        for block in &self.blocks {
            h = block.forward(tape, scope, h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        self.head.forward(tape, scope, pooled)
    }
}
