use serde::{Deserialize, Serialize};

use super::vocab::{TokenSeq, PAD};
use crate::nn::{Graph, Init, ParamId, ParamStore, Real, Var};

/// Learned token table `[V, D]` plus positional table `[L, D]`.
#[derive(Clone, Copy, Debug)]
pub struct TextEmbedder {
    pub table: ParamId,
    pub pos: ParamId,
    pub max_len: usize,
    pub dim: usize,
}

/// A materialized `L x D` embedding, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbedding {
    pub len: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl TokenEmbedding {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

impl TextEmbedder {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        vocab_size: usize,
        max_len: usize,
        dim: usize,
        seed: u64,
    ) -> Self {
        let table = store.add(
            &format!("{prefix}.token"),
            &[vocab_size, dim],
            Init::Normal(0.02),
            seed,
        );
        let pos = store.add(
            &format!("{prefix}.position"),
            &[max_len, dim],
            Init::Normal(0.01),
            seed,
        );
        Self {
            table,
            pos,
            max_len,
            dim,
        }
    }

    /// Adds the embedding of `tokens` to `g` as an `[L, D]` node.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, tokens: &TokenSeq) -> Var {
        assert_eq!(
            tokens.len(),
            self.max_len,
            "token sequence length must equal L"
        );
        let table = g.param(self.table);
        let pos = g.param(self.pos);
        g.embed(table, pos, &tokens.ids, &tokens.attention_mask, PAD)
    }

    pub fn embed<T: Real>(&self, store: &ParamStore<T>, tokens: &TokenSeq) -> TokenEmbedding {
        let mut g = Graph::inference(store);
        let e = self.forward(&mut g, tokens);
        TokenEmbedding {
            len: self.max_len,
            dim: self.dim,
            values: g.value(e).iter().map(|v| v.as_f64() as f32).collect(),
        }
    }
}
