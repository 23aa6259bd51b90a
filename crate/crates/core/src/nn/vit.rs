use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dense, LayerNorm, MultiHeadAttention, ParamStore, Scope};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    /// Width of one input token before embedding.
    pub token_dim: usize,
    pub heads: usize,
    pub d_k: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    /// Capacity of the learned position table; unbounded without one.
    pub max_tokens: usize,
    pub position_embeddings: bool,
    pub feature_dim: usize,
}

impl VitConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.d_k
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp1: Dense,
    mlp2: Dense,
}

/// Transformer encoder over a set of tokens with a learned class token.
///
/// The class token reads the input tokens through attention but is never
/// itself a key or value, so the sequence keys are exactly the input tokens.
/// The final class-token state is normalized and projected to `F`.
#[derive(Clone, Debug)]
pub struct VitEncoder {
    pub config: VitConfig,
    name: String,
    embed: Dense,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    proj: Dense,
}

impl VitEncoder {
    pub fn init(store: &mut ParamStore, name: &str, config: &VitConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = config;
        if c.token_dim == 0 || c.feature_dim == 0 || c.mlp_hidden == 0 || c.max_tokens == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        let d = c.d_model();
        let embed = Dense::init(store, &format!("{name}.embed"), c.token_dim, d, rng);
        let small = Normal::new(0.0, 0.02).expect("valid std");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| small.sample(rng)).collect() };
        store.add_weight(format!("{name}.cls"), Tensor::new(vec![1, d], draw(d))?);
        if c.position_embeddings {
            store.add_weight(
                format!("{name}.pos"),
                Tensor::new(vec![c.max_tokens, d], draw(c.max_tokens * d))?,
            );
        }
        let mut blocks = Vec::with_capacity(c.depth);
        for i in 0..c.depth {
            let p = format!("{name}.block{i}");
            blocks.push(Block {
                ln1: LayerNorm::init(store, &format!("{p}.ln1"), d),
                attn: MultiHeadAttention::init(store, &format!("{p}.attn"), c.heads, c.d_k, rng)?,
                ln2: LayerNorm::init(store, &format!("{p}.ln2"), d),
                mlp1: Dense::init(store, &format!("{p}.mlp1"), d, c.mlp_hidden, rng),
                mlp2: Dense::init(store, &format!("{p}.mlp2"), c.mlp_hidden, d, rng),
            });
        }
        let ln_final = LayerNorm::init(store, &format!("{name}.ln_final"), d);
        let proj = Dense::init(store, &format!("{name}.proj"), d, c.feature_dim, rng);
        Ok(VitEncoder {
            config: config.clone(),
            name: name.to_string(),
            embed,
            blocks,
            ln_final,
            proj,
        })
    }

    /// `[n, token_dim] -> [1, F]`.
    pub fn forward(&self, tape: &mut Tape, scope: &Scope, tokens: Var) -> Result<Var> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 2 || s[1] != self.config.token_dim {
            return Err(Error::shape(format!(
                "transformer expects [n, {}] tokens, got {s:?}",
                self.config.token_dim
            )));
        }
        let n = s[0];
        if self.config.position_embeddings && n > self.config.max_tokens {
            return Err(Error::shape(format!(
                "{n} tokens exceed capacity {}",
                self.config.max_tokens
            )));
        }
        let mut x = self.embed.forward(tape, scope, tokens)?;
        if self.config.position_embeddings {
            let table = scope.param(&format!("{}.pos", self.name))?;
            let pos = tape.slice(table, 0, 0, n)?;
            x = tape.add(x, pos)?;
        }
        let cls = scope.param(&format!("{}.cls", self.name))?;
        let mut seq = tape.concat(&[cls, x], 0)?;
        for b in &self.blocks {
            let normed = b.ln1.forward(tape, scope, seq)?;
            let context = tape.slice(normed, 0, 1, n)?;
            let (attended, _) = b.attn.attend(tape, scope, normed, context)?;
            seq = tape.add(seq, attended)?;
            let normed = b.ln2.forward(tape, scope, seq)?;
            let h = b.mlp1.forward(tape, scope, normed)?;
            let h = tape.relu(h);
            let h = b.mlp2.forward(tape, scope, h)?;
            seq = tape.add(seq, h)?;
        }
        let cls_state = tape.slice(seq, 0, 0, 1)?;
        let cls_state = self.ln_final.forward(tape, scope, cls_state)?;
        self.proj.forward(tape, scope, cls_state)
    }

    /// Encodes each token set and stacks the results into `[B, F]`.
    pub fn forward_batch(&self, tape: &mut Tape, scope: &Scope, token_sets: &[Tensor]) -> Result<Var> {
        if token_sets.is_empty() {
            return Err(Error::Empty("transformer batch"));
        }
        let rows = token_sets
            .iter()
            .map(|t| {
                let v = tape.constant(t.clone());
                self.forward(tape, scope, v)
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            tape.concat(&rows, 0)
        }
    }
}

/// One token per 2-D patch: the means of its non-overlapping `cell x cell`
/// sub-patches, row-major. Trailing rows/columns that do not fill a cell are dropped.
pub fn patch_tokens(patches: &[Tensor], cell: usize) -> Result<Tensor> {
    let first = patches.first().ok_or(Error::Empty("patch list"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 2 || cell == 0 || cell > shape[0] || cell > shape[1] {
        return Err(Error::shape(format!("cannot tile {shape:?} patches with cell {cell}")));
    }
    let (gh, gw) = (shape[0] / cell, shape[1] / cell);
    let width = shape[1];
    let area = (cell * cell) as f64;
    let mut data = Vec::with_capacity(patches.len() * gh * gw);
    for p in patches {
        if p.shape() != shape.as_slice() {
            return Err(Error::shape("patches differ in shape"));
        }
        for gy in 0..gh {
            for gx in 0..gw {
                let mut total = 0.0;
                for y in gy * cell..(gy + 1) * cell {
                    total += p.data()[y * width + gx * cell..][..cell].iter().sum::<f64>();
                }
                data.push(total / area);
            }
        }
    }
    Tensor::new(vec![patches.len(), gh * gw], data)
}

/// Tokens from a `[C, D, H, W]` volume: each non-overlapping `cell^3` cube,
/// flattened channel-major, is one token.
pub fn volume_tokens(volume: &Tensor, cell: usize) -> Result<Tensor> {
    let s = volume.shape();
    if s.len() != 4 || cell == 0 || s[1..].iter().any(|&d| d < cell) {
        return Err(Error::shape(format!("cannot tile volume {s:?} with cell {cell}")));
    }
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (gd, gh, gw) = (d / cell, h / cell, w / cell);
    let token_dim = c * cell * cell * cell;
    let mut data = Vec::with_capacity(gd * gh * gw * token_dim);
    for z0 in 0..gd {
        for y0 in 0..gh {
            for x0 in 0..gw {
                for ch in 0..c {
                    for z in z0 * cell..(z0 + 1) * cell {
                        for y in y0 * cell..(y0 + 1) * cell {
                            let row = ((ch * d + z) * h + y) * w + x0 * cell;
                            data.extend_from_slice(&volume.data()[row..row + cell]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![gd * gh * gw, token_dim], data)
}
