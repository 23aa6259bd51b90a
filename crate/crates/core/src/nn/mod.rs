//! Parameter storage, layers, and the two encoder families.

mod attention;
mod cnn;
mod layers;
mod params;
mod vit;

pub use attention::MultiHeadAttention;
pub use cnn::{CnnConfig, CnnDepth, CnnEncoder};
pub use layers::{BatchNorm, Conv, Dense, LayerNorm};
pub use params::{Gradients, Param, ParamStore, Scope};
pub use vit::{patch_tokens, volume_tokens, VitConfig, VitEncoder};

use serde::{Deserialize, Serialize};

/// Train mode uses batch statistics and records them; eval mode is a pure
/// function of parameters and input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Encoder family used for a module's backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    CnnSmall,
    CnnMedium,
    Vit,
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backbone::CnnSmall => "cnn-small",
            Backbone::CnnMedium => "cnn-medium",
            Backbone::Vit => "vit",
        })
    }
}
