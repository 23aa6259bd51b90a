//! Cross-modal feature synthesis for binary subtype classification.
//!
//! A pathology classifier ([`pfe`]) learns feature vectors from 2-D patches; a
//! conditional GAN ([`pfsm`]) learns to synthesize those vectors from 3-D
//! volumes; the fused classifier ([`sghf`]) concatenates synthesized and
//! directly extracted volume features. [`eval`] runs cross-validated
//! experiments and ablations over the procedural dataset in [`data`].

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod pfe;
pub mod pfsm;
pub mod rng;
pub mod sghf;
pub mod tensor;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{MetricsReport, Summary};
pub use sghf::Variant;
pub use tensor::{Tape, Tensor, Var};
