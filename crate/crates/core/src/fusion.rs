//! Genomic-guided co-attention, set-based MIL aggregation and the final
//! survival head.

use std::io::Write;

use rand_chacha::ChaCha8Rng;

use crate::diff::{Tensor, Var};
use crate::encoders::{EncoderError, TransformerBlock, CATEGORY_NAMES};
use crate::nn::{Linear, ParamStore, Session};

/// Single-head cross attention with genomic queries over pathology instances.
#[derive(Clone, Debug)]
pub struct CoAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    key_dim: usize,
}

impl CoAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, query_dim: usize, width: usize) -> Self {
        Self {
            wq: Linear::without_bias(store, rng, &format!("{name}.wq"), query_dim, width),
            wk: Linear::without_bias(store, rng, &format!("{name}.wk"), width, width),
            wv: Linear::without_bias(store, rng, &format!("{name}.wv"), width, width),
            key_dim: width,
        }
    }

    /// `softmax(X̃ W_q (Y W_k)ᵀ / √d_k) · Y W_v`. Returns the attended
    /// `categories × width` matrix and the `categories × M` weights.
    pub fn co_attend(&self, s: &mut Session, genes: Var, instances: Var) -> Result<(Var, Var), EncoderError> {
        if s.g.shape(instances)[0] == 0 {
            return Err(EncoderError::EmptyBag);
        }
        let q = self.wq.forward(s, genes)?;
        let k = self.wk.forward(s, instances)?;
        let v = self.wv.forward(s, instances)?;
        let kt = s.g.transpose(k)?;
        let scores = s.g.matmul(q, kt)?;
        let scores = s.g.scale(scores, 1.0 / (self.key_dim as f64).sqrt());
        let weights = s.g.softmax_lastdim(scores)?;
        let attended = s.g.matmul(weights, v)?;
        Ok((attended, weights))
    }
}

/// Gated attention pooling: `softmax(w · (tanh(V x) ⊙ σ(U x)))` weights a
/// convex combination of the rows.
#[derive(Clone, Debug)]
pub struct AttnPool {
    tanh_branch: Linear,
    gate_branch: Linear,
    score: Linear,
}

impl AttnPool {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            tanh_branch: Linear::new(store, rng, &format!("{name}.tanh"), width, hidden),
            gate_branch: Linear::new(store, rng, &format!("{name}.gate"), width, hidden),
            score: Linear::new(store, rng, &format!("{name}.score"), hidden, 1),
        }
    }

    /// Returns the pooled `1 × width` row and the `1 × n` weights.
    pub fn pool(&self, s: &mut Session, x: Var) -> Result<(Var, Var), EncoderError> {
        let a = self.tanh_branch.forward(s, x)?;
        let a = s.g.tanh(a);
        let b = self.gate_branch.forward(s, x)?;
        let b = s.g.sigmoid(b);
        let gated = s.g.mul(a, b)?;
        let scores = self.score.forward(s, gated)?;
        let scores = s.g.transpose(scores)?;
        let weights = s.g.softmax_lastdim(scores)?;
        let pooled = s.g.matmul(weights, x)?;
        Ok((pooled, weights))
    }
}

/// Set transformer followed by attention pooling.
#[derive(Clone, Debug)]
pub struct MilAggregator {
    input: Option<Linear>,
    block: TransformerBlock,
    pool: AttnPool,
}

/// Pooled vector of a MIL aggregation with its intermediate weights.
pub struct Aggregated {
    pub pooled: Var,
    pub pool_weights: Var,
    pub attention: Vec<Var>,
}

impl MilAggregator {
    pub fn new(input: Option<Linear>, block: TransformerBlock, pool: AttnPool) -> Self {
        Self { input, block, pool }
    }

    pub fn mil_aggregate(&self, s: &mut Session, seq: Var) -> Result<Aggregated, EncoderError> {
        if s.g.shape(seq)[0] == 0 {
            return Err(EncoderError::EmptyBag);
        }
        let x = match &self.input {
            Some(lin) => {
                let h = lin.forward(s, seq)?;
                s.g.relu(h)
            }
            None => seq,
        };
        let (x, attention) = self.block.forward(s, x, 0)?;
        let (pooled, pool_weights) = self.pool.pool(s, x)?;
        Ok(Aggregated {
            pooled,
            pool_weights,
            attention,
        })
    }
}

/// Final affine head on the concatenated pooled vectors, returning `1 × B` logits.
pub fn predict_survival(head: &Linear, s: &mut Session, pathology: Var, genomic: Var) -> Result<Var, EncoderError> {
    let both = s.g.concat(&[pathology, genomic], 1)?;
    Ok(head.forward(s, both)?)
}

/// Writes `patient,category,instance,weight` rows for one patient's
/// `categories × M` co-attention matrix.
pub fn write_coattention_csv<W: Write>(mut out: W, patient: &str, weights: &Tensor, header: bool) -> std::io::Result<()> {
    if header {
        writeln!(out, "patient,category,instance,weight")?;
    }
    let (rows, cols) = weights.dims2();
    for r in 0..rows {
        let name = CATEGORY_NAMES.get(r).copied().unwrap_or("category");
        for c in 0..cols {
            writeln!(out, "{patient},{name},{c},{}", weights.at(r, c))?;
        }
    }
    Ok(())
}

/// Indices of the `k` largest weights in a row, largest first.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
