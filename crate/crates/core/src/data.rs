//! Seeded synthetic multimodal cohorts and their on-disk format.
//!
//! Every patient carries a latent risk factor `r ~ N(0, 1)` that drives the
//! event rate, shifts the pathology instances along a hidden direction and
//! scales a per-category genomic direction. Stored values are rounded to
//! `f32` at generation time so that a disk round-trip is lossless.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::Tensor;
use crate::encoders::{CATEGORIES, CATEGORY_NAMES};
use crate::survival::{assign_bins, SurvivalError, SurvivalLabel};

pub const FOLDS: usize = 5;
pub const FEATURES_MAGIC: &[u8; 8] = b"LDCVCOHT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;
const DICTIONARY_ATOMS: usize = 8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid cohort spec: {0}")]
    Spec(String),
    #[error("malformed cohort header: {0}")]
    Header(String),
    #[error("cohort payload truncated: need {needed} values, file holds {found}")]
    Truncated { needed: usize, found: usize },
    #[error("cohort format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("cohort i/o")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_patients: usize,
    /// Inclusive range of instances per bag.
    pub bag_size_range: [usize; 2],
    /// Pathology instance dimension `D_p`.
    pub path_dim: usize,
    /// Raw length of each genomic category vector.
    pub genomic_dim: usize,
    /// Coupling of the latent risk factor to both modalities.
    pub signal_strength: f64,
    /// Expected fraction of censored patients.
    pub censor_rate: f64,
    /// Fraction of evaluation patients without genomics; applied only at evaluation.
    pub missing_rate: f64,
    /// Mean survival in months at `r = 0`.
    pub time_scale: f64,
    pub bins: usize,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_patients: 200,
            bag_size_range: [16, 32],
            path_dim: 64,
            genomic_dim: 64,
            signal_strength: 1.5,
            censor_rate: 0.3,
            missing_rate: 0.0,
            time_scale: 30.0,
            bins: 4,
            seed: 7,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: &str| Err(DataError::Spec(msg.to_string()));
        if self.n_patients == 0 {
            return bad("n_patients must be positive");
        }
        if self.bag_size_range[0] == 0 || self.bag_size_range[0] > self.bag_size_range[1] {
            return bad("bag_size_range must satisfy 1 <= min <= max");
        }
        if self.path_dim == 0 || self.genomic_dim == 0 || self.bins == 0 {
            return bad("dimensions and bin count must be positive");
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return bad("signal_strength must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return bad("censor_rate must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1]");
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return bad("time_scale must be positive");
        }
        Ok(())
    }

    pub fn schema(&self) -> Vec<usize> {
        vec![self.genomic_dim; CATEGORIES]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    /// `M × D_p` instance features.
    pub bag: Tensor,
    /// Six raw category vectors, or `None` when the modality is missing.
    pub genomics: Option<Vec<Vec<f64>>>,
    pub label: SurvivalLabel,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub records: Vec<PatientRecord>,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Probability that a uniform censoring time on `[0, horizon]` precedes an
/// exponential event with rate `exp(r) / scale`, averaged over `r ~ N(0, 1)`
/// by trapezoidal quadrature on `[−8, 8]`.
fn expected_censoring(horizon: f64, scale: f64) -> f64 {
    let steps = 1600;
    let h = 16.0 / steps as f64;
    let mut acc = 0.0;
    for k in 0..=steps {
        let r = -8.0 + k as f64 * h;
        let density = (-0.5 * r * r).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let x = r.exp() / scale * horizon;
        // (1 − e^{−x}) / x, expanded near zero
        let p = if x < 1e-8 { 1.0 - 0.5 * x } else { -(-x).exp_m1() / x };
        let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
        acc += w * density * p;
    }
    acc * h
}

/// Censoring horizon whose expected censored fraction equals `rate`.
fn censoring_horizon(rate: f64, scale: f64) -> f64 {
    let (mut lo, mut hi) = (1e-6_f64.ln(), 1e9_f64.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        // censoring probability decreases as the horizon grows
        if expected_censoring(mid.exp(), scale) > rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Draws a cohort. Bins are assigned cohort-wide from quantiles of the
/// uncensored times; training code may re-bin on its own split.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let atoms: Vec<Vec<f64>> = (0..DICTIONARY_ATOMS)
        .map(|_| (0..spec.path_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let path_direction = unit_vector(&mut rng, spec.path_dim);
    // per-category directions with entries of unit scale
    let gene_directions: Vec<Vec<f64>> = (0..CATEGORIES)
        .map(|_| (0..spec.genomic_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let horizon = (spec.censor_rate > 0.0).then(|| censoring_horizon(spec.censor_rate, spec.time_scale));
    let bag_sizes = Uniform::new_inclusive(spec.bag_size_range[0], spec.bag_size_range[1])
        .map_err(|e| DataError::Spec(e.to_string()))?;

    let mut records = Vec::with_capacity(spec.n_patients);
    for k in 0..spec.n_patients {
        let r: f64 = StandardNormal.sample(&mut rng);
        let m = bag_sizes.sample(&mut rng);
        let mut bag = Vec::with_capacity(m * spec.path_dim);
        for _ in 0..m {
            let atom = &atoms[rng.random_range(0..DICTIONARY_ATOMS)];
            for j in 0..spec.path_dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                bag.push(round_f32(atom[j] + spec.signal_strength * r * path_direction[j] + noise));
            }
        }
        let genomics = gene_directions
            .iter()
            .map(|a| {
                a.iter()
                    .map(|&aj| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        round_f32(spec.signal_strength * r * aj + noise)
                    })
                    .collect()
            })
            .collect();
        let rate = r.exp() / spec.time_scale;
        let event: f64 = Exp::new(rate).map_err(|e| DataError::Spec(e.to_string()))?.sample(&mut rng);
        let (time, censored) = match horizon {
            Some(h) => {
                let c = rng.random_range(0.0..h);
                if c < event { (c, true) } else { (event, false) }
            }
            None => (event, false),
        };
        // keep times strictly positive after rounding
        let time = round_f32(time).max(f32::MIN_POSITIVE as f64);
        records.push(PatientRecord {
            id: format!("P{k:05}"),
            bag: Tensor::new(vec![m, spec.path_dim], bag).expect("bag length"),
            genomics: Some(genomics),
            label: SurvivalLabel::new(time, censored),
            fold: 0,
        });
    }

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    for (pos, &i) in order.iter().enumerate() {
        records[i].fold = pos % FOLDS;
    }
    let times: Vec<f64> = records.iter().map(|r| r.label.time_months).collect();
    let censored: Vec<bool> = records.iter().map(|r| r.label.censored).collect();
    let (bins, _) = assign_bins(&times, &censored, spec.bins)?;
    for (rec, b) in records.iter_mut().zip(bins) {
        rec.label.bin = b;
    }
    Ok(Cohort { spec: spec.clone(), records })
}

/// Removes genomics from `round(η · n)` patients chosen by seeded sampling
/// without replacement: the first patients of a seeded permutation. For a
/// fixed seed the masked sets are nested as η grows.
pub fn mask_genomics(records: &[PatientRecord], eta: f64, seed: u64) -> Vec<PatientRecord> {
    let n = records.len();
    let count = ((eta.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = records.to_vec();
    for &i in &order[..count] {
        out[i].genomics = None;
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: CohortSpec,
    schema: Vec<SchemaEntry>,
    patients: Vec<ManifestPatient>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemaEntry {
    category: String,
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestPatient {
    id: String,
    fold: usize,
    time_months: f64,
    censored: bool,
    bin: usize,
    bag_rows: usize,
    has_genomics: bool,
    /// Offset of the patient's first value in the payload, in values.
    offset: usize,
}

/// Writes `manifest.json` and `features.bin` into `dir`, creating it if needed.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let schema = cohort.spec.schema();
    let mut payload: Vec<u8> = Vec::new();
    payload.extend_from_slice(FEATURES_MAGIC);
    payload.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut patients = Vec::with_capacity(cohort.records.len());
    let mut offset = 0;
    for rec in &cohort.records {
        let (rows, cols) = rec.bag.dims2();
        if cols != cohort.spec.path_dim {
            return Err(DataError::Manifest(format!("patient {} has {cols} features per instance", rec.id)));
        }
        let mut values: Vec<f64> = rec.bag.data().to_vec();
        if let Some(g) = &rec.genomics {
            if g.len() != CATEGORIES || g.iter().zip(&schema).any(|(v, &len)| v.len() != len) {
                return Err(DataError::Manifest(format!("patient {} does not match the genomic schema", rec.id)));
            }
            values.extend(g.iter().flatten());
        }
        for v in &values {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        patients.push(ManifestPatient {
            id: rec.id.clone(),
            fold: rec.fold,
            time_months: rec.label.time_months,
            censored: rec.label.censored,
            bin: rec.label.bin,
            bag_rows: rows,
            has_genomics: rec.genomics.is_some(),
            offset,
        });
        offset += values.len();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: cohort.spec.clone(),
        schema: CATEGORY_NAMES
            .iter()
            .zip(&schema)
            .map(|(c, &l)| SchemaEntry {
                category: c.to_string(),
                length: l,
            })
            .collect(),
        patients,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::File::create(dir.join("manifest.json"))?.write_all(&json)?;
    fs::File::create(dir.join("features.bin"))?.write_all(&payload)?;
    Ok(())
}

/// Reads a cohort directory. The whole payload is validated before any
/// record is built.
pub fn read_cohort(dir: &Path) -> Result<Cohort, DataError> {
    let bytes = fs::read(dir.join("features.bin"))?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != FEATURES_MAGIC {
        return Err(DataError::Header("missing or corrupted magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(DataError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() % 4 != 0 {
        return Err(DataError::Truncated {
            needed: body.len() / 4 + 1,
            found: body.len() / 4,
        });
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DataError::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let schema: Vec<usize> = manifest.schema.iter().map(|e| e.length).collect();
    if schema.len() != CATEGORIES {
        return Err(DataError::Manifest(format!("schema lists {} categories", schema.len())));
    }
    let gene_len: usize = schema.iter().sum();
    let dim = manifest.spec.path_dim;
    let needed = manifest
        .patients
        .iter()
        .map(|p| p.offset + p.bag_rows * dim + if p.has_genomics { gene_len } else { 0 })
        .max()
        .unwrap_or(0);
    let found = body.len() / 4;
    if needed > found {
        return Err(DataError::Truncated { needed, found });
    }
    let value = |i: usize| f32::from_le_bytes(body[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;

    let records = manifest
        .patients
        .iter()
        .map(|p| {
            let bag_len = p.bag_rows * dim;
            let bag = Tensor::new(vec![p.bag_rows, dim], (0..bag_len).map(|i| value(p.offset + i)).collect())
                .expect("bag length");
            let genomics = p.has_genomics.then(|| {
                let mut at = p.offset + bag_len;
                schema
                    .iter()
                    .map(|&len| {
                        let v = (at..at + len).map(value).collect();
                        at += len;
                        v
                    })
                    .collect()
            });
            PatientRecord {
                id: p.id.clone(),
                bag,
                genomics,
                label: SurvivalLabel {
                    time_months: p.time_months,
                    censored: p.censored,
                    bin: p.bin,
                },
                fold: p.fold,
            }
        })
        .collect();
    Ok(Cohort {
        spec: manifest.spec,
        records,
    })
}
