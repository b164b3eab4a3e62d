//! The assembled multimodal survival model: pathology bottleneck encoder,
//! genomic LD-CVAE branch, co-attention fusion and the survival head, plus
//! its binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Tensor, Var};
use crate::encoders::{
    ldvae_encode, vib_survival_head, AttentionKind, EncoderError, GenomicEmbedder, PathologyEncoder, TokenEncoder,
    TransformerBlock, CATEGORIES,
};
use crate::fusion::{predict_survival, AttnPool, CoAttention, MilAggregator};
use crate::gaussian::{kl_to_standard_vars, reparameterize_vars, AlignKind, GaussianError, NoiseSource};
use crate::ldcvae::{joint_posterior, ldcvae_loss, FunctionDecoder, FunctionMapper, LdCvaeLossReport, LdCvaeTerms};
use crate::nn::{Linear, ParamStore, Session};
use crate::survival::{nll_survival_vars, SurvivalError, SurvivalLabel, SurvivalOutput};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Transformer width `d_m`.
    pub d_model: usize,
    pub heads: usize,
    /// Depth of both variational encoders.
    pub layers: usize,
    /// Depth of the MIL set transformers.
    pub mil_layers: usize,
    /// Latent dimension `d`.
    pub latent: usize,
    /// Pathology instance feature dimension `D_p`.
    pub path_dim: usize,
    /// Genomic embedding dimension `D_g`.
    pub genomic_dim: usize,
    /// Raw vector length of each of the six genomic categories.
    pub genomic_schema: Vec<usize>,
    pub bins: usize,
    pub ffn_hidden: usize,
    pub pool_hidden: usize,
    pub align: AlignKind,
    pub attention: AttentionKind,
    /// `false` ablates everything genomic: the pathology-only baseline.
    pub genomic_branch: bool,
    /// Training-time dropout rate on projected instances and genomic
    /// embedder hidden units.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            mil_layers: 1,
            latent: 32,
            path_dim: 64,
            genomic_dim: 64,
            genomic_schema: vec![64; CATEGORIES],
            bins: 4,
            ffn_hidden: 128,
            pool_hidden: 32,
            align: AlignKind::Variance,
            attention: AttentionKind::Exact,
            genomic_branch: true,
            dropout: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.d_model,
            self.heads,
            self.latent,
            self.path_dim,
            self.genomic_dim,
            self.bins,
            self.ffn_hidden,
            self.pool_hidden,
        ];
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if dims.contains(&0) || self.layers == 0 || self.mil_layers == 0 {
            return Err(ModelError::Config("all dimensions and depths must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.genomic_schema.len() != CATEGORIES || self.genomic_schema.contains(&0) {
            return Err(ModelError::Config(format!(
                "genomic schema needs {CATEGORIES} positive lengths, got {:?}",
                self.genomic_schema
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct GenomicBranch {
    embedder: GenomicEmbedder,
    ldvae: TokenEncoder,
    mapper: FunctionMapper,
    decoder: FunctionDecoder,
    coattention: CoAttention,
    mil_genomic: MilAggregator,
}

#[derive(Clone, Debug)]
pub struct LdCvaeModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pathology: PathologyEncoder,
    vib_head: Linear,
    mil_pathology: MilAggregator,
    head: Linear,
    genomic: Option<GenomicBranch>,
}

/// Bottleneck-objective terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VibReport {
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
}

/// Values of every loss term for one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub surv: f64,
    pub vib: VibReport,
    pub ld: Option<LdCvaeLossReport>,
    pub total: f64,
}

impl StepReport {
    /// Fusion survival term plus bottleneck term plus LD-CVAE term.
    pub fn recomposed(&self) -> f64 {
        self.surv + self.vib.total + self.ld.as_ref().map_or(0.0, |l| l.total)
    }
}

/// Graph nodes of every loss term for one patient.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub surv: Var,
    pub vib: Var,
    pub vib_nll: Var,
    pub ld_total: Option<Var>,
    pub ld_elbo: Option<Var>,
    pub align: Option<Var>,
    pub total: Var,
}

/// One patient's inputs. `genomics = None` means the modality is absent.
#[derive(Clone, Copy, Debug)]
pub struct PatientView<'a> {
    pub bag: &'a Tensor,
    pub genomics: Option<&'a [Vec<f64>]>,
}

/// Forward output used for evaluation and export.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub output: SurvivalOutput,
    /// `6 × M` co-attention weights; absent for the pathology-only baseline.
    pub coattention: Option<Tensor>,
    /// The genomic embeddings that fed the fusion, genuine or reconstructed.
    pub genomic_embeddings: Option<Tensor>,
    /// Per-layer, per-head attention matrices of the pathology encoder.
    pub encoder_attention: Vec<Tensor>,
    /// Posterior mean and variance of the pathology latent.
    pub path_posterior: (Vec<f64>, Vec<f64>),
}

impl LdCvaeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = &mut rng;

        let projection = Linear::new(s, r, "path.projection", c.path_dim, c.d_model);
        let vib = TokenEncoder::new(s, r, "path.vib", None, c.d_model, c.heads, c.ffn_hidden, c.layers, c.latent)?;
        let pathology = PathologyEncoder::new(vib, projection);
        let vib_head = Linear::new(s, r, "path.vib_head", c.latent, c.bins);
        let mil_pathology = MilAggregator::new(
            None,
            TransformerBlock::new(s, r, "mil_path.block", c.d_model, c.heads, c.ffn_hidden, c.mil_layers)?,
            AttnPool::new(s, r, "mil_path.pool", c.d_model, c.pool_hidden),
        );
        let genomic = if c.genomic_branch {
            Some(GenomicBranch {
                embedder: GenomicEmbedder::new(s, r, "gen.embed", &c.genomic_schema, c.genomic_dim)?,
                ldvae: TokenEncoder::new(
                    s,
                    r,
                    "gen.ldvae",
                    Some(c.genomic_dim),
                    c.d_model,
                    c.heads,
                    c.ffn_hidden,
                    c.layers,
                    c.latent,
                )?,
                mapper: FunctionMapper::new(s, r, "gen.mapper", c.latent, c.d_model),
                decoder: FunctionDecoder::new(s, r, "gen.decoder", c.latent, c.ffn_hidden, c.genomic_dim),
                coattention: CoAttention::new(s, r, "coattn", c.genomic_dim, c.d_model),
                mil_genomic: MilAggregator::new(
                    Some(Linear::new(s, r, "mil_gen.input", c.genomic_dim, c.d_model)),
                    TransformerBlock::new(s, r, "mil_gen.block", c.d_model, c.heads, c.ffn_hidden, c.mil_layers)?,
                    AttnPool::new(s, r, "mil_gen.pool", c.d_model, c.pool_hidden),
                ),
            })
        } else {
            None
        };
        let head = Linear::new(s, r, "head", 2 * c.d_model, c.bins);
        Ok(Self {
            config,
            store,
            pathology,
            vib_head,
            mil_pathology,
            head,
            genomic,
        })
    }

    pub fn has_genomic_branch(&self) -> bool {
        self.genomic.is_some()
    }

    /// Builds every loss term of one training patient. Genuine genomics are
    /// required when the genomic branch exists.
    pub fn loss_vars(
        &self,
        s: &mut Session,
        patient: PatientView,
        label: &SurvivalLabel,
        beta: f64,
        alpha: f64,
        noise: &mut NoiseSource,
    ) -> Result<(LossVars, StepReport), ModelError> {
        let h = self.pathology.project(s, patient.bag)?;
        let q_y = self.pathology.vib_trans_encode(s, h)?.posterior;
        let z_y = reparameterize_vars(&mut s.g, &q_y, noise)?;
        let vib_logits = vib_survival_head(&self.vib_head, s, z_y)?;
        let vib_nll = nll_survival_vars(&mut s.g, vib_logits, label)?;
        let vib_kl = kl_to_standard_vars(&mut s.g, &q_y)?;
        let vib_kl_weighted = s.g.scale(vib_kl, beta);
        let vib = s.g.add(vib_nll, vib_kl_weighted)?;
        let vib_report = VibReport {
            nll: s.g.value(vib_nll).item(),
            kl: s.g.value(vib_kl).item(),
            total: s.g.value(vib).item(),
        };

        let (logits, ld) = match &self.genomic {
            None => {
                let agg = self.mil_pathology.mil_aggregate(s, h)?;
                let zeros = s.g.constant(Tensor::zeros(&[1, self.config.d_model]));
                (predict_survival(&self.head, s, agg.pooled, zeros)?, None)
            }
            Some(gb) => {
                let raw = patient
                    .genomics
                    .ok_or_else(|| ModelError::Config("training requires genomic inputs".into()))?;
                let x = gb.embedder.embed(s, raw)?;
                let q_x = ldvae_encode(&gb.ldvae, s, x)?.posterior;
                let joint = joint_posterior(&mut s.g, &q_y, Some(&q_x))?;
                let z = reparameterize_vars(&mut s.g, &joint, noise)?;
                let specific = gb.mapper.differentiate_latent(s, z)?;
                let recon = gb.decoder.reconstruct_genomics(s, &specific, z_y, Some(noise))?;
                // reconstruction targets are held fixed so the embedder cannot
                // shrink its output to meet the decoder
                let target = s.g.constant(s.g.value(x).clone());
                let terms = LdCvaeTerms {
                    genes: target,
                    path_posterior: &q_y,
                    gene_posterior: &q_x,
                    reconstructions: &recon,
                    specific: &specific,
                    joint: &joint,
                };
                let (ld_vars, ld_report) = ldcvae_loss(&mut s.g, &terms, beta, alpha, self.config.align)?;
                let fused = s.dropout(x)?;
                let logits = self.fuse(s, gb, fused, h)?.0;
                (logits, Some((ld_vars, ld_report)))
            }
        };
        let surv = nll_survival_vars(&mut s.g, logits, label)?;
        let with_vib = s.g.add(surv, vib)?;
        let total = match &ld {
            Some((v, _)) => s.g.add(with_vib, v.total)?,
            None => with_vib,
        };
        let report = StepReport {
            surv: s.g.value(surv).item(),
            vib: vib_report,
            ld: ld.as_ref().map(|(_, r)| r.clone()),
            total: s.g.value(total).item(),
        };
        let vars = LossVars {
            surv,
            vib,
            vib_nll,
            ld_total: ld.as_ref().map(|(v, _)| v.total),
            ld_elbo: ld.as_ref().map(|(v, _)| v.elbo),
            align: ld.as_ref().map(|(v, _)| v.align),
            total,
        };
        Ok((vars, report))
    }

    /// Co-attention plus both MIL branches; returns logits and the co-attention weights.
    fn fuse(&self, s: &mut Session, gb: &GenomicBranch, genes: Var, instances: Var) -> Result<(Var, Var), ModelError> {
        let (attended, weights) = gb.coattention.co_attend(s, genes, instances)?;
        let p = self.mil_pathology.mil_aggregate(s, attended)?;
        let g = gb.mil_genomic.mil_aggregate(s, genes)?;
        Ok((predict_survival(&self.head, s, p.pooled, g.pooled)?, weights))
    }

    /// Deterministic prediction. With genomics the genuine embeddings feed the
    /// fusion; without them the genomic embeddings are reconstructed from the
    /// pathology-only joint posterior, using posterior means throughout.
    pub fn predict(&self, patient: PatientView) -> Result<Prediction, ModelError> {
        let mut s = Session::new(&self.store, false);
        let s = &mut s;
        let h = self.pathology.project(s, patient.bag)?;
        let enc = self.pathology.vib_trans_encode(s, h)?;
        let q_y = enc.posterior;
        let encoder_attention = enc.attention.iter().map(|&a| s.g.value(a).clone()).collect();
        let path_posterior = (s.g.value(q_y.mean).data().to_vec(), s.g.value(q_y.var).data().to_vec());
        let (logits, coattention, genes) = match &self.genomic {
            None => {
                let agg = self.mil_pathology.mil_aggregate(s, h)?;
                let zeros = s.g.constant(Tensor::zeros(&[1, self.config.d_model]));
                (predict_survival(&self.head, s, agg.pooled, zeros)?, None, None)
            }
            Some(gb) => {
                let x = match patient.genomics {
                    Some(raw) => gb.embedder.embed(s, raw)?,
                    None => {
                        let joint = joint_posterior(&mut s.g, &q_y, None)?;
                        let specific = gb.mapper.differentiate_latent(s, joint.mean)?;
                        let recon = gb.decoder.reconstruct_genomics(s, &specific, q_y.mean, None)?;
                        s.g.concat(&recon, 0)?
                    }
                };
                let (logits, weights) = self.fuse(s, gb, x, h)?;
                (logits, Some(s.g.value(weights).clone()), Some(s.g.value(x).clone()))
            }
        };
        Ok(Prediction {
            output: SurvivalOutput::from_logits(s.g.value(logits).data()),
            coattention,
            genomic_embeddings: genes,
            encoder_attention,
            path_posterior,
        })
    }

    /// Genomic posterior mean and variance for genuine genomics.
    pub fn genomic_posterior(&self, raw: &[Vec<f64>]) -> Result<Option<(Vec<f64>, Vec<f64>)>, ModelError> {
        let Some(gb) = &self.genomic else { return Ok(None) };
        let mut s = Session::new(&self.store, false);
        let x = gb.embedder.embed(&mut s, raw)?;
        let q = ldvae_encode(&gb.ldvae, &mut s, x)?.posterior;
        Ok(Some((s.g.value(q.mean).data().to_vec(), s.g.value(q.var).data().to_vec())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::read_checkpoint(&bytes)
    }

    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<(), CheckpointError> {
        let config = serde_json::to_vec(&self.config).map_err(|e| CheckpointError::Config(e.to_string()))?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(config.len() as u64).to_le_bytes())?;
        out.write_all(&config)?;
        out.write_all(&(self.store.len() as u64).to_le_bytes())?;
        for p in self.store.params() {
            out.write_all(&(p.name.len() as u32).to_le_bytes())?;
            out.write_all(p.name.as_bytes())?;
            out.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u64()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let mut model = Self::new(config, 0).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let count = r.u64()? as usize;
        if count != model.store.len() {
            return Err(CheckpointError::ParamCount {
                found: count,
                expected: model.store.len(),
            });
        }
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| CheckpointError::Truncated)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let id = model.store.id(&name).ok_or_else(|| CheckpointError::UnknownParam(name.clone()))?;
            if model.store.get(id).shape() != shape.as_slice() {
                return Err(CheckpointError::Shape(name));
            }
            let target = model.store.get_mut(id).data_mut();
            let raw = r.take(target.len() * 8)?;
            for (t, chunk) in target.iter_mut().zip(raw.chunks_exact(8)) {
                *t = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(model)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LDCVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("checkpoint config: {0}")]
    Config(String),
    #[error("checkpoint holds {found} parameters, model expects {expected}")]
    ParamCount { found: usize, expected: usize },
    #[error("checkpoint parameter {0} is not part of the model")]
    UnknownParam(String),
    #[error("checkpoint parameter {0} has the wrong shape")]
    Shape(String),
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
