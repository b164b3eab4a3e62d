//! Feature embedding and the token-readout variational encoders.
//!
//! Both encoders prepend two learnable tokens to their input sequence and
//! read the posterior mean and log-variance from those token rows after the
//! transformer. Token rows query the sequence but are never used as keys, so
//! the posterior depends on the sequence only through attention averages over
//! its elements: it is invariant to element order and to duplicating every
//! element.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Tensor, Var};
use crate::gaussian::{GaussianError, GaussianVars};
use crate::nn::{glorot, LayerNorm, Linear, ParamId, ParamStore, Session};

/// Number of functional genomic categories.
pub const CATEGORIES: usize = 6;

pub const CATEGORY_NAMES: [&str; CATEGORIES] = [
    "tumor_suppression",
    "oncogenesis",
    "protein_kinases",
    "cellular_differentiation",
    "transcription",
    "cytokines_and_growth",
];

/// Log-variances leaving an encoder are clamped to this range.
pub const LOG_VAR_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("feature bag is empty")]
    EmptyBag,
    #[error("category {category}: expected raw length {expected}, found {found}")]
    SchemaMismatch {
        category: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("expected {expected} genomic categories, found {found}")]
    CategoryCount { expected: usize, found: usize },
    #[error("model width {width} is not divisible by {heads} heads")]
    HeadSplit { width: usize, heads: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

/// Attention implementation. Only exact softmax attention exists.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Exact,
}

/// Per-category two-layer embedder: affine, ELU, affine.
#[derive(Clone, Debug)]
pub struct GenomicEmbedder {
    nets: Vec<(Linear, Linear)>,
    schema: Vec<usize>,
    pub out_dim: usize,
}

impl GenomicEmbedder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, schema: &[usize], out_dim: usize) -> Result<Self, EncoderError> {
        if schema.len() != CATEGORIES {
            return Err(EncoderError::CategoryCount {
                expected: CATEGORIES,
                found: schema.len(),
            });
        }
        let nets = schema
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                let cat = CATEGORY_NAMES[i];
                (
                    Linear::new(store, rng, &format!("{name}.{cat}.0"), len, out_dim),
                    Linear::new(store, rng, &format!("{name}.{cat}.1"), out_dim, out_dim),
                )
            })
            .collect();
        Ok(Self {
            nets,
            schema: schema.to_vec(),
            out_dim,
        })
    }

    pub fn schema(&self) -> &[usize] {
        &self.schema
    }

    /// Embeds the six raw category vectors into a `6 × out_dim` matrix.
    pub fn embed(&self, s: &mut Session, raw: &[Vec<f64>]) -> Result<Var, EncoderError> {
        if raw.len() != CATEGORIES {
            return Err(EncoderError::CategoryCount {
                expected: CATEGORIES,
                found: raw.len(),
            });
        }
        let mut rows = Vec::with_capacity(CATEGORIES);
        for (i, ((first, second), values)) in self.nets.iter().zip(raw).enumerate() {
            if values.len() != self.schema[i] {
                return Err(EncoderError::SchemaMismatch {
                    category: CATEGORY_NAMES[i],
                    expected: self.schema[i],
                    found: values.len(),
                });
            }
            let x = s.g.constant(Tensor::row(values));
            let h = first.forward(s, x)?;
            let h = s.g.elu(h);
            rows.push(second.forward(s, h)?);
        }
        Ok(s.g.concat(&rows, 0)?)
    }
}

/// Pre-norm encoder layer: multi-head attention and a ReLU feed-forward
/// pair, each wrapped in a residual connection.
#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    layers: Vec<EncoderLayer>,
    pub heads: usize,
    pub width: usize,
    pub attention: AttentionKind,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
        layers: usize,
    ) -> Result<Self, EncoderError> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(EncoderError::HeadSplit { width, heads });
        }
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), width),
                    wq: Linear::new(store, rng, &format!("{p}.wq"), width, width),
                    wk: Linear::new(store, rng, &format!("{p}.wk"), width, width),
                    wv: Linear::new(store, rng, &format!("{p}.wv"), width, width),
                    wo: Linear::new(store, rng, &format!("{p}.wo"), width, width),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), width),
                    ff_in: Linear::new(store, rng, &format!("{p}.ff_in"), width, ffn_hidden),
                    ff_out: Linear::new(store, rng, &format!("{p}.ff_out"), ffn_hidden, width),
                }
            })
            .collect();
        Ok(Self {
            layers,
            heads,
            width,
            attention: AttentionKind::Exact,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Encodes the rows of `x`. Every row queries; only rows from `key_start`
    /// on serve as keys and values. Returns the output and each layer's
    /// per-head attention matrices.
    pub fn forward(&self, s: &mut Session, x: Var, key_start: usize) -> Result<(Var, Vec<Var>), EncoderError> {
        let rows = s.g.shape(x)[0];
        if key_start >= rows {
            return Err(EncoderError::EmptyBag);
        }
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = x;
        let mut attn = Vec::with_capacity(self.layers.len() * self.heads);
        for layer in &self.layers {
            let xn = layer.ln_attn.forward(s, x)?;
            let q = layer.wq.forward(s, xn)?;
            let src = if key_start == 0 { xn } else { s.g.slice(xn, 0, key_start, rows)? };
            let k = layer.wk.forward(s, src)?;
            let v = layer.wv.forward(s, src)?;
            let kt = s.g.transpose(k)?;
            let mut outs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = s.g.slice(q, 1, lo, hi)?;
                let kh = s.g.slice(kt, 0, lo, hi)?;
                let vh = s.g.slice(v, 1, lo, hi)?;
                let scores = s.g.matmul(qh, kh)?;
                let scores = s.g.scale(scores, scale);
                let a = s.g.softmax_lastdim(scores)?;
                attn.push(a);
                outs.push(s.g.matmul(a, vh)?);
            }
            let o = if outs.len() == 1 { outs[0] } else { s.g.concat(&outs, 1)? };
            let o = layer.wo.forward(s, o)?;
            x = s.g.add(x, o)?;
            let xn = layer.ln_ff.forward(s, x)?;
            let f = layer.ff_in.forward(s, xn)?;
            let f = s.g.relu(f);
            let f = layer.ff_out.forward(s, f)?;
            x = s.g.add(x, f)?;
        }
        Ok((x, attn))
    }
}

/// The two learnable rows read out as posterior mean and log-variance.
#[derive(Clone, Debug)]
pub struct PosteriorTokens {
    pub mu_token: ParamId,
    pub sigma_token: ParamId,
}

/// Output of a token-readout encoder.
pub struct Encoded {
    pub posterior: GaussianVars,
    pub attention: Vec<Var>,
}

/// Shared token-readout encoder behind both variational encoders.
#[derive(Clone, Debug)]
pub struct TokenEncoder {
    input: Option<Linear>,
    pub tokens: PosteriorTokens,
    block: TransformerBlock,
    final_ln: LayerNorm,
    mu_head: Linear,
    log_var_head: Linear,
    pub latent: usize,
}

impl TokenEncoder {
    /// `input_dim = None` means the sequence already has the model width.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input_dim: Option<usize>,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
        layers: usize,
        latent: usize,
    ) -> Result<Self, EncoderError> {
        let input = input_dim.map(|d| Linear::new(store, rng, &format!("{name}.input"), d, width));
        let tokens = PosteriorTokens {
            mu_token: store.add(format!("{name}.mu_token"), glorot(rng, 1, width)),
            sigma_token: store.add(format!("{name}.sigma_token"), glorot(rng, 1, width)),
        };
        let block = TransformerBlock::new(store, rng, &format!("{name}.block"), width, heads, ffn_hidden, layers)?;
        Ok(Self {
            input,
            tokens,
            block,
            final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), width),
            mu_head: Linear::new(store, rng, &format!("{name}.mu_head"), width, latent),
            log_var_head: Linear::new(store, rng, &format!("{name}.log_var_head"), width, latent),
            latent,
        })
    }

    pub fn encode(&self, s: &mut Session, seq: Var) -> Result<Encoded, EncoderError> {
        if s.g.shape(seq)[0] == 0 {
            return Err(EncoderError::EmptyBag);
        }
        let h = match &self.input {
            Some(lin) => {
                let h = lin.forward(s, seq)?;
                s.g.relu(h)
            }
            None => seq,
        };
        let mu_tok = s.param(self.tokens.mu_token);
        let sigma_tok = s.param(self.tokens.sigma_token);
        let x = s.g.concat(&[mu_tok, sigma_tok, h], 0)?;
        let (x, attention) = self.block.forward(s, x, 2)?;
        let readout = s.g.slice(x, 0, 0, 2)?;
        let readout = self.final_ln.forward(s, readout)?;
        let mu_row = s.g.slice(readout, 0, 0, 1)?;
        let sigma_row = s.g.slice(readout, 0, 1, 2)?;
        let mean = self.mu_head.forward(s, mu_row)?;
        let log_var = self.log_var_head.forward(s, sigma_row)?;
        let log_var = s.g.clamp(log_var, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
        let posterior = GaussianVars::from_log_var(&mut s.g, mean, log_var)?;
        Ok(Encoded { posterior, attention })
    }
}

/// Pathology branch front end: a shared instance projection and the
/// VIB-Trans posterior encoder over the projected bag.
#[derive(Clone, Debug)]
pub struct PathologyEncoder {
    projection: Linear,
    pub encoder: TokenEncoder,
}

impl PathologyEncoder {
    pub fn new(encoder: TokenEncoder, projection: Linear) -> Self {
        Self { projection, encoder }
    }

    /// Instance embeddings `relu(Y W + b)`, one row per instance.
    pub fn project(&self, s: &mut Session, bag: &Tensor) -> Result<Var, EncoderError> {
        if bag.is_empty() || bag.dims2().0 == 0 {
            return Err(EncoderError::EmptyBag);
        }
        let y = s.g.constant(bag.clone());
        let h = self.projection.forward(s, y)?;
        let h = s.g.relu(h);
        Ok(s.dropout(h)?)
    }

    /// Posterior over the compressed pathology code from projected instances.
    pub fn vib_trans_encode(&self, s: &mut Session, projected: Var) -> Result<Encoded, EncoderError> {
        self.encoder.encode(s, projected)
    }
}

/// LD-VAE genomic posterior from the six embedded categories.
pub fn ldvae_encode(encoder: &TokenEncoder, s: &mut Session, genes: Var) -> Result<Encoded, EncoderError> {
    let n = s.g.shape(genes)[0];
    if n != CATEGORIES {
        return Err(EncoderError::CategoryCount {
            expected: CATEGORIES,
            found: n,
        });
    }
    encoder.encode(s, genes)
}

/// Affine map from a pathology latent sample to survival logits, used only
/// inside the bottleneck objective.
pub fn vib_survival_head(head: &Linear, s: &mut Session, z_y: Var) -> Result<Var, EncoderError> {
    Ok(head.forward(s, z_y)?)
}
