//! Diagonal-Gaussian algebra: product-of-experts fusion, KL divergences,
//! alignment distances and the reparameterized sampler.
//!
//! Every operation exists twice: on plain values ([`DiagGaussian`]) and on
//! graph nodes ([`GaussianVars`]) so that losses can be differentiated. The
//! value forms double as reference implementations for the graph forms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Graph, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("variance at index {index} is not strictly positive ({value})")]
    NonPositiveVariance { index: usize, value: f64 },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// `N(mean, diag(var))` with strictly positive variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self, GaussianError> {
        if mean.len() != var.len() {
            return Err(GaussianError::DimensionMismatch {
                expected: mean.len(),
                found: var.len(),
            });
        }
        if let Some((index, &value)) = var.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(GaussianError::NonPositiveVariance { index, value });
        }
        Ok(Self { mean, var })
    }

    pub fn from_log_var(mean: Vec<f64>, log_var: &[f64]) -> Result<Self, GaussianError> {
        Self::new(mean, log_var.iter().map(|v| v.exp()).collect())
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn precision(&self) -> Vec<f64> {
        self.var.iter().map(|v| 1.0 / v).collect()
    }

    fn same_dim(&self, other: &Self) -> Result<(), GaussianError> {
        if self.dim() != other.dim() {
            return Err(GaussianError::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }
}

/// Product of Gaussian experts and a prior, renormalized. Precisions add and
/// the mean is the precision-weighted average. No experts returns the prior.
pub fn poe_combine(experts: &[DiagGaussian], prior: &DiagGaussian) -> Result<DiagGaussian, GaussianError> {
    for e in experts {
        prior.same_dim(e)?;
    }
    if experts.is_empty() {
        return Ok(prior.clone());
    }
    let d = prior.dim();
    let mut precision = prior.precision();
    let mut weighted: Vec<f64> = (0..d).map(|j| prior.mean[j] / prior.var[j]).collect();
    for e in experts {
        for j in 0..d {
            precision[j] += 1.0 / e.var[j];
            weighted[j] += e.mean[j] / e.var[j];
        }
    }
    let var: Vec<f64> = precision.iter().map(|p| 1.0 / p).collect();
    let mean = weighted.iter().zip(&var).map(|(w, v)| w * v).collect();
    DiagGaussian::new(mean, var)
}

/// `KL(q ‖ N(0, I)) = ½ Σ (var + mean² − 1 − ln var)`.
pub fn kl_to_standard(q: &DiagGaussian) -> f64 {
    0.5 * q
        .mean
        .iter()
        .zip(&q.var)
        .map(|(m, v)| v + m * m - 1.0 - v.ln())
        .sum::<f64>()
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_between(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64, GaussianError> {
    q.same_dim(p)?;
    let mut total = 0.0;
    for j in 0..q.dim() {
        let diff = q.mean[j] - p.mean[j];
        total += (p.var[j] / q.var[j]).ln() + (q.var[j] + diff * diff) / p.var[j] - 1.0;
    }
    Ok(0.5 * total)
}

/// Alignment distance `‖μ_a − μ_b‖² + ‖Σ_a − Σ_b‖²`, with the variance vectors
/// compared directly.
pub fn wasserstein_align(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64, GaussianError> {
    a.same_dim(b)?;
    Ok((0..a.dim())
        .map(|j| {
            let dm = a.mean[j] - b.mean[j];
            let dv = a.var[j] - b.var[j];
            dm * dm + dv * dv
        })
        .sum())
}

/// Exact squared 2-Wasserstein distance between diagonal Gaussians,
/// `‖μ_a − μ_b‖² + Σ (√var_a − √var_b)²`.
pub fn wasserstein2_exact(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64, GaussianError> {
    a.same_dim(b)?;
    Ok((0..a.dim())
        .map(|j| {
            let dm = a.mean[j] - b.mean[j];
            let ds = a.var[j].sqrt() - b.var[j].sqrt();
            dm * dm + ds * ds
        })
        .sum())
}

/// Which alignment distance the training objective uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignKind {
    /// Squared difference of variance vectors.
    #[default]
    Variance,
    /// Squared difference of standard deviations (exact W2 for diagonal Gaussians).
    Exact,
}

/// Seeded stream of standard-normal draws. The same `(seed, counter)` always
/// yields the same next draw.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    seed: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Positions the stream so that the next draw is draw number `counter`.
    pub fn at(seed: u64, counter: u64) -> Self {
        let mut s = Self::new(seed);
        for _ in 0..counter {
            s.next_normal();
        }
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_normal(&mut self) -> f64 {
        self.counter += 1;
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_normal()).collect()
    }
}

/// `mean + √var ⊙ ε` with ε drawn from `noise`.
pub fn reparameterize(q: &DiagGaussian, noise: &mut NoiseSource) -> Vec<f64> {
    q.mean
        .iter()
        .zip(&q.var)
        .map(|(m, v)| m + v.sqrt() * noise.next_normal())
        .collect()
}

/// A diagonal Gaussian whose parameters live on a [`Graph`] as `1 × d` rows.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub var: Var,
    pub log_var: Var,
}

impl GaussianVars {
    pub fn from_log_var(g: &mut Graph, mean: Var, log_var: Var) -> Result<Self, GaussianError> {
        check_row_pair(g, mean, log_var)?;
        let var = g.exp(log_var);
        Ok(Self { mean, var, log_var })
    }

    pub fn from_var(g: &mut Graph, mean: Var, var: Var) -> Result<Self, GaussianError> {
        check_row_pair(g, mean, var)?;
        let log_var = g.log(var)?;
        Ok(Self { mean, var, log_var })
    }

    /// Places a value-level Gaussian on the graph as constants.
    pub fn constant(g: &mut Graph, q: &DiagGaussian) -> Self {
        let mean = g.constant(Tensor::row(&q.mean));
        let var = g.constant(Tensor::row(&q.var));
        let log_var = g.constant(Tensor::row(&q.var.iter().map(|v| v.ln()).collect::<Vec<_>>()));
        Self { mean, var, log_var }
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.value(self.mean).len()
    }

    pub fn to_value(&self, g: &Graph) -> Result<DiagGaussian, GaussianError> {
        DiagGaussian::new(g.value(self.mean).data().to_vec(), g.value(self.var).data().to_vec())
    }
}

fn check_row_pair(g: &Graph, a: Var, b: Var) -> Result<(), GaussianError> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa[0] != 1 || sa != sb {
        return Err(DiffError::ShapeMismatch {
            op: "gaussian",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        }
        .into());
    }
    Ok(())
}

fn same_dim_vars(g: &Graph, a: &GaussianVars, b: &GaussianVars) -> Result<(), GaussianError> {
    let (da, db) = (a.dim(g), b.dim(g));
    if da != db {
        return Err(GaussianError::DimensionMismatch { expected: da, found: db });
    }
    Ok(())
}

/// Differentiable product of experts against a standard-normal prior.
pub fn poe_standard_prior(g: &mut Graph, experts: &[GaussianVars], dim: usize) -> Result<GaussianVars, GaussianError> {
    let prior = GaussianVars::constant(g, &DiagGaussian::standard(dim));
    poe_combine_vars(g, experts, &prior)
}

/// Differentiable product of experts with an arbitrary prior.
pub fn poe_combine_vars(g: &mut Graph, experts: &[GaussianVars], prior: &GaussianVars) -> Result<GaussianVars, GaussianError> {
    for e in experts {
        same_dim_vars(g, prior, e)?;
    }
    if experts.is_empty() {
        return Ok(*prior);
    }
    // precision_i = exp(−log var_i)
    let neg = g.neg(prior.log_var);
    let mut precision = g.exp(neg);
    let mut weighted = g.mul(prior.mean, precision)?;
    for e in experts {
        let neg = g.neg(e.log_var);
        let p = g.exp(neg);
        precision = g.add(precision, p)?;
        let w = g.mul(e.mean, p)?;
        weighted = g.add(weighted, w)?;
    }
    let log_precision = g.log(precision)?;
    let log_var = g.neg(log_precision);
    let var = g.exp(log_var);
    let mean = g.mul(weighted, var)?;
    Ok(GaussianVars { mean, var, log_var })
}

/// Differentiable `KL(q ‖ N(0, I))` as a scalar node.
pub fn kl_to_standard_vars(g: &mut Graph, q: &GaussianVars) -> Result<Var, GaussianError> {
    let m2 = g.square(q.mean);
    let a = g.add(q.var, m2)?;
    let b = g.sub(a, q.log_var)?;
    let s = g.sum(b);
    let d = q.dim(g) as f64;
    let shift = g.constant(Tensor::scalar(-d));
    let total = g.add(s, shift)?;
    Ok(g.scale(total, 0.5))
}

/// Differentiable `KL(q ‖ p)`.
pub fn kl_between_vars(g: &mut Graph, q: &GaussianVars, p: &GaussianVars) -> Result<Var, GaussianError> {
    same_dim_vars(g, q, p)?;
    let log_ratio = g.sub(p.log_var, q.log_var)?;
    let diff = g.sub(q.mean, p.mean)?;
    let d2 = g.square(diff);
    let num = g.add(q.var, d2)?;
    let frac = g.div(num, p.var)?;
    let inner = g.add(log_ratio, frac)?;
    let s = g.sum(inner);
    let d = q.dim(g) as f64;
    let shift = g.constant(Tensor::scalar(-d));
    let total = g.add(s, shift)?;
    Ok(g.scale(total, 0.5))
}

/// Differentiable alignment distance of the requested kind.
pub fn align_vars(g: &mut Graph, a: &GaussianVars, b: &GaussianVars, kind: AlignKind) -> Result<Var, GaussianError> {
    same_dim_vars(g, a, b)?;
    let dm = g.sub(a.mean, b.mean)?;
    let dm2 = g.square(dm);
    let (sa, sb) = match kind {
        AlignKind::Variance => (a.var, b.var),
        AlignKind::Exact => {
            let ha = g.scale(a.log_var, 0.5);
            let hb = g.scale(b.log_var, 0.5);
            (g.exp(ha), g.exp(hb))
        }
    };
    let ds = g.sub(sa, sb)?;
    let ds2 = g.square(ds);
    let both = g.add(dm2, ds2)?;
    Ok(g.sum(both))
}

/// Differentiable reparameterized sample, a `1 × d` row.
pub fn reparameterize_vars(g: &mut Graph, q: &GaussianVars, noise: &mut NoiseSource) -> Result<Var, GaussianError> {
    let d = q.dim(g);
    let eps = g.constant(Tensor::row(&noise.normals(d)));
    let std = g.sqrt(q.var)?;
    let scaled = g.mul(std, eps)?;
    Ok(g.add(q.mean, scaled)?)
}
