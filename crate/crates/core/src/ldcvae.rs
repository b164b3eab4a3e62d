//! Latent differentiation, conditional reconstruction of the genomic
//! categories and the LD-CVAE objective.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Var};
use crate::encoders::{EncoderError, CATEGORIES, CATEGORY_NAMES, LOG_VAR_RANGE};
use crate::gaussian::{
    align_vars, kl_to_standard_vars, poe_combine, poe_standard_prior, reparameterize_vars, AlignKind, DiagGaussian,
    GaussianError, GaussianVars, NoiseSource,
};
use crate::nn::{Linear, ParamStore, Session};

/// Joint posterior over the shared latent. With genomics present both
/// experts are combined with the standard-normal prior; otherwise only the
/// pathology expert is.
pub fn joint_posterior(g: &mut crate::diff::Graph, path: &GaussianVars, genes: Option<&GaussianVars>) -> Result<GaussianVars, GaussianError> {
    let d = path.dim(g);
    match genes {
        Some(x) => poe_standard_prior(g, &[*x, *path], d),
        None => poe_standard_prior(g, &[*path], d),
    }
}

/// Value form of [`joint_posterior`].
pub fn joint_posterior_value(path: &DiagGaussian, genes: Option<&DiagGaussian>) -> Result<DiagGaussian, GaussianError> {
    let prior = DiagGaussian::standard(path.dim());
    match genes {
        Some(x) => poe_combine(&[x.clone(), path.clone()], &prior),
        None => poe_combine(std::slice::from_ref(path), &prior),
    }
}

/// Six mappers ψ_i: latent → hidden (ReLU) → (mean, log-variance).
#[derive(Clone, Debug)]
pub struct FunctionMapper {
    nets: Vec<(Linear, Linear)>,
    latent: usize,
}

impl FunctionMapper {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, latent: usize, hidden: usize) -> Self {
        let nets = CATEGORY_NAMES
            .iter()
            .map(|cat| {
                (
                    Linear::new(store, rng, &format!("{name}.{cat}.0"), latent, hidden),
                    Linear::new(store, rng, &format!("{name}.{cat}.1"), hidden, 2 * latent),
                )
            })
            .collect();
        Self { nets, latent }
    }

    pub fn layers(&self, category: usize) -> (&Linear, &Linear) {
        let (a, b) = &self.nets[category];
        (a, b)
    }

    /// Function-specific posteriors `N(ψ_i^μ(z), ψ_i^Σ(z))` for the six categories.
    pub fn differentiate_latent(&self, s: &mut Session, z: Var) -> Result<Vec<GaussianVars>, EncoderError> {
        let d = self.latent;
        let mut out = Vec::with_capacity(CATEGORIES);
        for (first, second) in &self.nets {
            let h = first.forward(s, z)?;
            let h = s.g.relu(h);
            let params = second.forward(s, h)?;
            let mean = s.g.slice(params, 1, 0, d)?;
            let log_var = s.g.slice(params, 1, d, 2 * d)?;
            let log_var = s.g.clamp(log_var, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
            out.push(GaussianVars::from_log_var(&mut s.g, mean, log_var)?);
        }
        Ok(out)
    }
}

/// Six decoders θ_i: concat(z_i, z_Y) → hidden (ReLU) → category embedding.
#[derive(Clone, Debug)]
pub struct FunctionDecoder {
    nets: Vec<(Linear, Linear)>,
}

impl FunctionDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, latent: usize, hidden: usize, out_dim: usize) -> Self {
        let nets = CATEGORY_NAMES
            .iter()
            .map(|cat| {
                (
                    Linear::new(store, rng, &format!("{name}.{cat}.0"), 2 * latent, hidden),
                    Linear::new(store, rng, &format!("{name}.{cat}.1"), hidden, out_dim),
                )
            })
            .collect();
        Self { nets }
    }

    pub fn layers(&self, category: usize) -> (&Linear, &Linear) {
        let (a, b) = &self.nets[category];
        (a, b)
    }

    /// Decodes each category from its latent and the pathology latent. With
    /// a noise source the category latents are reparameterized samples;
    /// without one their means are used.
    pub fn reconstruct_genomics(
        &self,
        s: &mut Session,
        specific: &[GaussianVars],
        z_y: Var,
        mut noise: Option<&mut NoiseSource>,
    ) -> Result<Vec<Var>, EncoderError> {
        if specific.len() != CATEGORIES {
            return Err(EncoderError::CategoryCount {
                expected: CATEGORIES,
                found: specific.len(),
            });
        }
        let mut out = Vec::with_capacity(CATEGORIES);
        for ((first, second), q) in self.nets.iter().zip(specific) {
            let z_i = match noise.as_deref_mut() {
                Some(n) => reparameterize_vars(&mut s.g, q, n)?,
                None => q.mean,
            };
            let input = s.g.concat(&[z_i, z_y], 1)?;
            let h = first.forward(s, input)?;
            let h = s.g.relu(h);
            out.push(second.forward(s, h)?);
        }
        Ok(out)
    }
}

/// Per-term values of one LD-CVAE loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdCvaeLossReport {
    pub recon: Vec<f64>,
    pub kl_joint: f64,
    pub kl_specific: Vec<f64>,
    pub align: f64,
    pub total: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl LdCvaeLossReport {
    /// `Σ recon + β (Σ kl_specific + kl_joint) + α align`, from the parts.
    pub fn recomposed(&self) -> f64 {
        self.recon.iter().sum::<f64>()
            + self.beta * (self.kl_specific.iter().sum::<f64>() + self.kl_joint)
            + self.alpha * self.align
    }
}

/// Inputs of [`ldcvae_loss`], all living on the same graph.
pub struct LdCvaeTerms<'a> {
    /// Target category embeddings, `6 × D_g`.
    pub genes: Var,
    pub path_posterior: &'a GaussianVars,
    pub gene_posterior: &'a GaussianVars,
    /// Reconstructions, six `1 × D_g` rows.
    pub reconstructions: &'a [Var],
    pub specific: &'a [GaussianVars],
    pub joint: &'a GaussianVars,
}

/// Graph nodes of the objective: the full loss, its ELBO part
/// (reconstruction plus weighted KL) and the unweighted alignment distance.
#[derive(Clone, Copy, Debug)]
pub struct LdCvaeVars {
    pub total: Var,
    pub elbo: Var,
    pub align: Var,
}

/// Differentiable LD-CVAE objective and its per-term report.
pub fn ldcvae_loss(
    g: &mut crate::diff::Graph,
    terms: &LdCvaeTerms,
    beta: f64,
    alpha: f64,
    align: AlignKind,
) -> Result<(LdCvaeVars, LdCvaeLossReport), GaussianError> {
    if terms.reconstructions.len() != CATEGORIES || terms.specific.len() != CATEGORIES {
        return Err(GaussianError::DimensionMismatch {
            expected: CATEGORIES,
            found: terms.reconstructions.len().min(terms.specific.len()),
        });
    }
    let mut recon_vars = Vec::with_capacity(CATEGORIES);
    for (i, &xhat) in terms.reconstructions.iter().enumerate() {
        let x = g.slice(terms.genes, 0, i, i + 1)?;
        let diff = g.sub(x, xhat)?;
        let sq = g.square(diff);
        recon_vars.push(g.sum(sq));
    }
    let kl_specific_vars = terms
        .specific
        .iter()
        .map(|q| kl_to_standard_vars(g, q))
        .collect::<Result<Vec<_>, _>>()?;
    let kl_joint = kl_to_standard_vars(g, terms.joint)?;
    let align_var = align_vars(g, terms.gene_posterior, terms.path_posterior, align)?;

    let recon_sum = sum_vars(g, &recon_vars)?;
    let kl_sum = sum_vars(g, &kl_specific_vars)?;
    let kl_all = g.add(kl_sum, kl_joint)?;
    let kl_weighted = g.scale(kl_all, beta);
    let align_weighted = g.scale(align_var, alpha);
    let elbo = g.add(recon_sum, kl_weighted)?;
    let total = g.add(elbo, align_weighted)?;

    let item = |v: Var| g.value(v).item();
    let report = LdCvaeLossReport {
        recon: recon_vars.iter().map(|&v| item(v)).collect(),
        kl_joint: item(kl_joint),
        kl_specific: kl_specific_vars.iter().map(|&v| item(v)).collect(),
        align: item(align_var),
        total: item(total),
        beta,
        alpha,
    };
    Ok((
        LdCvaeVars {
            total,
            elbo,
            align: align_var,
        },
        report,
    ))
}

pub(crate) fn sum_vars(g: &mut crate::diff::Graph, vars: &[Var]) -> Result<Var, DiffError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use rand::SeedableRng;

    #[test]
    fn zero_mapper_gives_standard_posteriors() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mapper = FunctionMapper::new(&mut store, &mut rng, "psi", 3, 5);
        for p in store.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut s = Session::new(&store, false);
        let z = s.g.constant(Tensor::row(&[0.4, -2.0, 1.0]));
        for q in mapper.differentiate_latent(&mut s, z).unwrap() {
            let q = q.to_value(&s.g).unwrap();
            assert_eq!(q, DiagGaussian::standard(3));
        }
    }

    #[test]
    fn zero_decoder_reconstructs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = FunctionDecoder::new(&mut store, &mut rng, "theta", 2, 4, 3);
        for p in store.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut s = Session::new(&store, false);
        let q = GaussianVars::constant(&mut s.g, &DiagGaussian::new(vec![5.0, -3.0], vec![2.0, 0.5]).unwrap());
        let z_y = s.g.constant(Tensor::row(&[1.0, 2.0]));
        let mut noise = NoiseSource::new(4);
        let out = dec.reconstruct_genomics(&mut s, &[q; 6], z_y, Some(&mut noise)).unwrap();
        for x in out {
            assert!(s.g.value(x).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn joint_without_genomics_halves_unit_variance_expert() {
        let path = DiagGaussian::new(vec![1.2], vec![1.0]).unwrap();
        let q = joint_posterior_value(&path, None).unwrap();
        assert!((q.mean()[0] - 0.6).abs() < 1e-15);
        assert!((q.var()[0] - 0.5).abs() < 1e-15);
    }
}
