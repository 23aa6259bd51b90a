use rand::Rng;

use super::layers::he_normal;
use super::{ParamStore, Scope};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Multi-head scaled dot-product attention.
///
/// Each head `t` projects queries, keys and values with its own
/// `W_Q[t]`, `W_K[t]` (`d_model x d_k`) and `W_V[t]` (`d_model x d_v`),
/// computes `softmax(Q K^T / sqrt(d_k)) V`, and the concatenated heads are
/// mapped back to `d_model` by `W_O` (`h*d_v x d_model`).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl MultiHeadAttention {
    /// Requires `d_model = heads * d_k` and uses `d_v = d_k`.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        heads: usize,
        d_k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_k == 0 {
            return Err(Error::Config("attention needs at least one head of width >= 1".into()));
        }
        let d_model = heads * d_k;
        let d_v = d_k;
        for t in 0..heads {
            for (w, width) in [("wq", d_k), ("wk", d_k), ("wv", d_v)] {
                store.add_weight(
                    format!("{name}.{w}.{t}"),
                    he_normal(&[d_model, width], d_model, rng),
                );
            }
        }
        store.add_weight(
            format!("{name}.wo"),
            he_normal(&[heads * d_v, d_model], heads * d_v, rng),
        );
        Ok(MultiHeadAttention {
            name: name.to_string(),
            heads,
            d_model,
            d_k,
            d_v,
        })
    }

    /// Self-attention over `[n, d_model]` tokens.
    pub fn forward(&self, tape: &mut Tape, scope: &Scope, tokens: Var) -> Result<Var> {
        self.attend(tape, scope, tokens, tokens).map(|(out, _)| out)
    }

    /// Queries from `queries` (`[n_q, d_model]`) attend over keys and values
    /// from `context` (`[n_kv, d_model]`). Also returns each head's
    /// `[n_q, n_kv]` attention matrix.
    pub fn attend(
        &self,
        tape: &mut Tape,
        scope: &Scope,
        queries: Var,
        context: Var,
    ) -> Result<(Var, Vec<Var>)> {
        for v in [queries, context] {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != self.d_model {
                return Err(Error::shape(format!(
                    "{}: tokens {s:?} do not have width d_model = {}",
                    self.name, self.d_model
                )));
            }
        }
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for t in 0..self.heads {
            let wq = scope.param(&format!("{}.wq.{t}", self.name))?;
            let wk = scope.param(&format!("{}.wk.{t}", self.name))?;
            let wv = scope.param(&format!("{}.wv.{t}", self.name))?;
            let q = tape.matmul(queries, wq)?;
            let k = tape.matmul(context, wk)?;
            let v = tape.matmul(context, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(attn, v)?);
            weights.push(attn);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        let wo = scope.param(&format!("{}.wo", self.name))?;
        Ok((tape.matmul(joined, wo)?, weights))
    }
}
