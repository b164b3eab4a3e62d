//! Self-checks behind the acceptance suite and the `check` command. Each
//! function runs one criterion against an independent oracle and reports a
//! pass/fail line.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{generate_cohort, CohortSpec, PatientRecord};
use crate::diff::{finite_difference_check, DiffError, Tensor, Var};
use crate::encoders::{AttentionKind, TokenEncoder, CATEGORIES};
use crate::fusion::AttnPool;
use crate::gaussian::{poe_combine, AlignKind, DiagGaussian, NoiseSource};
use crate::model::{LdCvaeModel, LossVars, ModelConfig, PatientView};
use crate::nn::{param_gradient_check, ParamStore, Session};
use crate::oracle::{brute_force_c_index, grid_density_product};
use crate::pipeline::{run_cv, AdamW, CvOptions, CvOutcome, PipelineError, TrainConfig};
use crate::survival::{c_index, logrank_test, nll_survival, nll_survival_vars, SurvivalLabel, SurvivalOutput};

/// Result of one acceptance criterion.
#[derive(Clone, Debug, PartialEq)]
pub struct CriterionOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CriterionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] criterion {:>2} {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(id: u8, name: &'static str, body: impl FnOnce() -> Result<(bool, String), String>) -> CriterionOutcome {
    let start = Instant::now();
    let (passed, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionOutcome {
        id,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Criterion 1: the closed-form product of two 1-d experts and a prior
/// against a normalized grid product of the three densities.
pub fn poe_correctness() -> CriterionOutcome {
    timed(1, "product of experts", || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let factors: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(-3.0..3.0), rng.random_range(0.2..4.0))).collect();
            let gauss = |&(m, v): &(f64, f64)| DiagGaussian::new(vec![m], vec![v]).map_err(|e| e.to_string());
            let experts = factors[..2].iter().map(gauss).collect::<Result<Vec<_>, _>>()?;
            let q = poe_combine(&experts, &gauss(&factors[2])?).map_err(|e| e.to_string())?;
            let (gm, gv) = grid_density_product(&factors, -20.0, 20.0, 1e-3);
            worst = worst.max((q.mean()[0] - gm).abs()).max((q.var()[0] - gv).abs());
        }
        let passed = worst < 1e-4;
        Ok((passed, format!("100 triples, max |closed form - grid| = {worst:.2e} (< 1e-4)")))
    })
}

fn random_label(rng: &mut ChaCha8Rng, bins: usize) -> SurvivalLabel {
    let mut label = SurvivalLabel::new(rng.random_range(0.5..60.0), rng.random_bool(0.4));
    label.bin = rng.random_range(0..bins);
    label
}

/// Small random model shape for gradient and invariance checks.
pub fn random_small_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = rng.random_range(1..=2);
    ModelConfig {
        // layer norm over two features is a near-sign function; keep widths above that
        d_model: heads * rng.random_range(3..=4),
        heads,
        layers: rng.random_range(1..=2),
        mil_layers: 1,
        latent: rng.random_range(2..=4),
        path_dim: rng.random_range(3..=5),
        genomic_dim: rng.random_range(3..=5),
        genomic_schema: (0..CATEGORIES).map(|_| rng.random_range(2..=4)).collect(),
        bins: rng.random_range(2..=4),
        ffn_hidden: rng.random_range(4..=8),
        pool_hidden: rng.random_range(2..=4),
        align: if rng.random_bool(0.5) { AlignKind::Variance } else { AlignKind::Exact },
        attention: AttentionKind::Exact,
        genomic_branch: true,
        dropout: 0.0,
    }
}

/// A synthetic patient shaped for `config`, with `instances` bag rows.
pub fn random_patient(rng: &mut ChaCha8Rng, config: &ModelConfig, instances: usize) -> PatientRecord {
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let bag: Vec<f64> = (0..instances * config.path_dim).map(|_| normal(rng)).collect();
    let genomics = config
        .genomic_schema
        .iter()
        .map(|&n| (0..n).map(|_| normal(rng)).collect())
        .collect();
    PatientRecord {
        id: "P00000".into(),
        bag: Tensor::new(vec![instances, config.path_dim], bag).expect("bag shape"),
        genomics: Some(genomics),
        label: random_label(rng, config.bins),
        fold: 0,
    }
}

/// Objective terms covered by the gradient suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Survival,
    VibTrans,
    LdCvaeElbo,
    Alignment,
    LdCvae,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Survival,
        LossTerm::VibTrans,
        LossTerm::LdCvaeElbo,
        LossTerm::Alignment,
        LossTerm::LdCvae,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Survival => "survival nll",
            LossTerm::VibTrans => "vib-trans",
            LossTerm::LdCvaeElbo => "ld-cvae elbo",
            LossTerm::Alignment => "alignment",
            LossTerm::LdCvae => "ld-cvae",
            LossTerm::Total => "total",
        }
    }

    fn pick(self, vars: &LossVars) -> Option<Var> {
        match self {
            LossTerm::Survival => Some(vars.surv),
            LossTerm::VibTrans => Some(vars.vib),
            LossTerm::LdCvaeElbo => vars.ld_elbo,
            LossTerm::Alignment => vars.align,
            LossTerm::LdCvae => vars.ld_total,
            LossTerm::Total => Some(vars.total),
        }
    }

    /// Terms containing the reconstruction error, whose target embeddings
    /// are held fixed.
    fn has_fixed_target(self) -> bool {
        matches!(self, LossTerm::LdCvaeElbo | LossTerm::LdCvae | LossTerm::Total)
    }
}

/// Worst relative error of one random configuration of `term`. The survival
/// NLL is checked against its logits; every other term against the model
/// parameters it depends on (the genomic embedder is skipped for terms whose
/// reconstruction target is a fixed copy of its output).
pub fn gradient_case(term: LossTerm, seed: u64) -> Result<f64, DiffError> {
    gradient_case_report(term, seed).map(|r| r.0)
}

/// [`gradient_case`] with the offending parameter's name, when one applies.
pub fn gradient_case_report(term: LossTerm, seed: u64) -> Result<(f64, Option<crate::nn::ParamCheck>), DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if term == LossTerm::Survival {
        let bins = rng.random_range(2..=6);
        let label = random_label(&mut rng, bins);
        let logits = Tensor::row(&(0..bins).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>());
        let err = finite_difference_check(
            |g, x| nll_survival_vars(g, x, &label).map_err(|e| DiffError::Invalid(e.to_string())),
            &logits,
            1e-5,
        )?;
        return Ok((err, None));
    }
    let config = random_small_config(&mut rng);
    let model = LdCvaeModel::new(config.clone(), rng.random()).map_err(|e| DiffError::Invalid(e.to_string()))?;
    let instances = rng.random_range(1..=4);
    let patient = random_patient(&mut rng, &config, instances);
    let beta = rng.random_range(0.0..1.0);
    let alpha = rng.random_range(0.0..1.0);
    let noise_seed: u64 = rng.random();
    let params: Vec<_> = model
        .store
        .ids()
        .filter(|&id| !(term.has_fixed_target() && model.store.params()[id.index()].name.starts_with("gen.embed.")))
        .collect();
    let report = param_gradient_check(&model.store, &params, 3, 1e-5, 1e-3, |s: &mut Session| {
        let mut noise = NoiseSource::new(noise_seed);
        let view = PatientView {
            bag: &patient.bag,
            genomics: patient.genomics.as_deref(),
        };
        let (vars, _) = model
            .loss_vars(s, view, &patient.label, beta, alpha, &mut noise)
            .map_err(|e| DiffError::Invalid(e.to_string()))?;
        term.pick(&vars).ok_or_else(|| DiffError::Invalid("term absent".into()))
    })?;
    Ok((report.worst, Some(report)))
}

/// Criterion 2: every objective term against central differences over 20
/// random configurations each.
pub fn gradient_suite() -> CriterionOutcome {
    timed(2, "gradient suite", || {
        let mut parts = Vec::new();
        let mut passed = true;
        for (k, term) in LossTerm::ALL.into_iter().enumerate() {
            let mut worst: f64 = 0.0;
            for case in 0..20 {
                let err = gradient_case(term, 1000 * k as u64 + case).map_err(|e| e.to_string())?;
                worst = worst.max(err);
            }
            passed &= worst < 1e-4;
            parts.push(format!("{} {worst:.1e}", term.name()));
        }
        Ok((passed, format!("max relative error per term (< 1e-4): {}", parts.join(", "))))
    })
}

/// Criterion 3: C-index against brute-force pair enumeration.
pub fn c_index_oracle() -> CriterionOutcome {
    timed(3, "c-index oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let mut mismatches = 0;
        let mut compared = 0;
        for _ in 0..100 {
            let n = rng.random_range(2..=50);
            // coarse grids produce tied times and tied risks
            let times: Vec<f64> = (0..n).map(|_| rng.random_range(1..=12) as f64).collect();
            let censored: Vec<bool> = (0..n).map(|_| rng.random_bool(0.35)).collect();
            let risks: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
            let labels: Vec<SurvivalLabel> = times.iter().zip(&censored).map(|(&t, &c)| SurvivalLabel::new(t, c)).collect();
            let events: Vec<bool> = censored.iter().map(|c| !c).collect();
            let fast = c_index(&risks, &labels).ok();
            let slow = brute_force_c_index(&risks, &times, &events);
            compared += 1;
            if fast != slow {
                mismatches += 1;
            }
        }
        Ok((mismatches == 0, format!("{compared} cohorts, {mismatches} mismatches")))
    })
}

/// Criterion 4: the two hand-derived NLL values.
pub fn nll_goldens() -> CriterionOutcome {
    timed(4, "survival nll goldens", || {
        let out = SurvivalOutput::from_logits(&[0.0, 0.0]);
        let mut uncensored = SurvivalLabel::new(3.0, false);
        uncensored.bin = 1;
        let censored = SurvivalLabel::new(3.0, true);
        let a = nll_survival(std::slice::from_ref(&out), &[uncensored]).map_err(|e| e.to_string())?;
        let b = nll_survival(std::slice::from_ref(&out), &[censored]).map_err(|e| e.to_string())?;
        let ea = (a - 2.0 * std::f64::consts::LN_2).abs();
        let eb = (b - std::f64::consts::LN_2).abs();
        Ok((
            ea < 1e-10 && eb < 1e-10,
            format!("uncensored {a:.12} (2 ln 2), censored {b:.12} (ln 2), max error {:.1e}", ea.max(eb)),
        ))
    })
}

/// Criterion 5: hand-tabulated log-rank statistic and the identical-groups case.
pub fn logrank_golden() -> CriterionOutcome {
    timed(5, "log-rank golden", || {
        let group = |ts: &[f64]| -> Vec<SurvivalLabel> { ts.iter().map(|&t| SurvivalLabel::new(t, false)).collect() };
        let a = group(&[1.0, 2.0, 3.0]);
        let b = group(&[10.0, 20.0, 30.0]);
        // O − E = 3 − (1/2 + 2/5 + 1/4) = 1.85; V = 1/4 + 6/25 + 3/16 = 0.6775
        let expected = 1.85f64.powi(2) / 0.6775;
        let r = logrank_test(&a, &b).map_err(|e| e.to_string())?;
        let same = logrank_test(&a, &a).map_err(|e| e.to_string())?;
        let err = (r.chi_square - expected).abs();
        Ok((
            err < 1e-9 && same.p_value == 1.0,
            format!("chi-square {:.10} (expected {expected:.10}), identical groups p = {}", r.chi_square, same.p_value),
        ))
    })
}

/// The reference cohort: seed 7, 200 patients, signal 1.5.
pub fn reference_cohort() -> Result<crate::data::Cohort, PipelineError> {
    Ok(generate_cohort(&CohortSpec::default())?)
}

/// Reference cross-validation runs: the full model twice (for determinism)
/// and the pathology-only baseline once.
pub struct ReferenceRuns {
    pub full: CvOutcome,
    pub full_seconds: f64,
    pub repeat: CvOutcome,
    pub baseline: CvOutcome,
}

pub fn reference_runs(threads: usize) -> Result<ReferenceRuns, PipelineError> {
    let cohort = reference_cohort()?;
    let options = CvOptions {
        threads,
        ..CvOptions::default()
    };
    let config = TrainConfig::default();
    let start = Instant::now();
    let full = run_cv(&cohort, &config, &options)?;
    let full_seconds = start.elapsed().as_secs_f64();
    let repeat = run_cv(&cohort, &config, &options)?;
    let mut baseline_config = config.clone();
    baseline_config.model.genomic_branch = false;
    let baseline = run_cv(&cohort, &baseline_config, &options)?;
    Ok(ReferenceRuns {
        full,
        full_seconds,
        repeat,
        baseline,
    })
}

/// Criterion 6: cross-validated C-index of the reference run.
pub fn reference_accuracy(runs: &ReferenceRuns) -> CriterionOutcome {
    timed(6, "reference c-index", || {
        let complete = runs.full.summary.complete.mean;
        let missing = runs.full.summary.missing.mean;
        let baseline = runs.baseline.summary.missing.mean;
        let passed = complete >= 0.70 && missing >= 0.62 && missing >= baseline - 0.02 && runs.full_seconds < 600.0;
        Ok((
            passed,
            format!(
                "complete {complete:.4} (>= 0.70), missing {missing:.4} (>= 0.62 and >= baseline {baseline:.4} - 0.02), run {:.0}s (< 600s)",
                runs.full_seconds
            ),
        ))
    })
}

/// Criterion 7: C-index along the missing-rate sweep never rises by more
/// than 0.03 from one rate to the next.
pub fn missing_rate_monotone(runs: &ReferenceRuns) -> CriterionOutcome {
    timed(7, "missing-rate monotonicity", || {
        let sweep = &runs.full.summary.eta_sweep;
        let worst_rise = sweep.windows(2).map(|w| w[1].1.mean - w[0].1.mean).fold(f64::NEG_INFINITY, f64::max);
        let values: Vec<String> = sweep.iter().map(|(eta, c)| format!("{eta}:{:.4}", c.mean)).collect();
        Ok((worst_rise <= 0.03, format!("sweep {} , largest rise {worst_rise:.4} (<= 0.03)", values.join(" "))))
    })
}

/// Criterion 8: final-epoch alignment below a quarter of the first epoch's, on every fold.
pub fn alignment_efficacy(runs: &ReferenceRuns) -> CriterionOutcome {
    timed(8, "alignment efficacy", || {
        let ratios: Vec<f64> = runs
            .full
            .folds
            .iter()
            .map(|f| match (f.loss_trace.first(), f.loss_trace.last()) {
                (Some(a), Some(b)) if a.align > 0.0 => b.align / a.align,
                _ => f64::NAN,
            })
            .collect();
        let worst = ratios.iter().copied().fold(0.0, f64::max);
        let passed = ratios.iter().all(|r| *r < 0.25);
        let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
        Ok((passed, format!("final/first epoch alignment per fold [{}], worst {worst:.3} (< 0.25)", shown.join(", "))))
    })
}

/// Criterion 9: two identical reference runs agree bit for bit.
pub fn determinism(runs: &ReferenceRuns) -> CriterionOutcome {
    timed(9, "determinism", || {
        let traces_equal = runs.full.traces == runs.repeat.traces;
        let bits = |o: &CvOutcome| -> Vec<u64> {
            o.folds
                .iter()
                .flat_map(|f| [f.c_index_complete, f.c_index_missing].into_iter().chain(f.eta_sweep.iter().map(|e| e.1)))
                .map(f64::to_bits)
                .collect()
        };
        let c_equal = bits(&runs.full) == bits(&runs.repeat);
        let steps: usize = runs.full.traces.iter().map(Vec::len).sum();
        Ok((
            traces_equal && c_equal,
            format!("{steps} step records identical: {traces_equal}; C-indices bit-identical: {c_equal}"),
        ))
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn permuted_rows(t: &Tensor, order: &[usize]) -> Tensor {
    let (_, cols) = t.dims2();
    let data: Vec<f64> = order.iter().flat_map(|&r| t.row_slice(r).to_vec()).collect();
    Tensor::new(vec![order.len(), cols], data).expect("same shape")
}

/// Largest drift of both encoders' posteriors under a row permutation.
pub fn encoder_permutation_drift(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let vib = TokenEncoder::new(&mut store, &mut rng, "vib", None, 8, 2, 12, 2, 3).map_err(|e| e.to_string())?;
    let ldvae = TokenEncoder::new(&mut store, &mut rng, "ld", Some(5), 8, 2, 12, 2, 3).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (encoder, rows, cols) in [(&vib, rng.random_range(2..12), 8), (&ldvae, CATEGORIES, 5)] {
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
            .map_err(|e| e.to_string())?;
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rng);
        let post = |t: &Tensor| -> Result<(Vec<f64>, Vec<f64>), String> {
            let mut s = Session::new(&store, false);
            let v = s.g.constant(t.clone());
            let q = encoder.encode(&mut s, v).map_err(|e| e.to_string())?.posterior;
            Ok((s.g.value(q.mean).data().to_vec(), s.g.value(q.var).data().to_vec()))
        };
        let (m1, v1) = post(&x)?;
        let (m2, v2) = post(&permuted_rows(&x, &order))?;
        worst = worst.max(max_abs_diff(&m1, &m2)).max(max_abs_diff(&v1, &v2));
    }
    Ok(worst)
}

/// Largest change in predicted risk when the bag rows are permuted, in
/// complete and missing mode.
pub fn end_to_end_permutation_drift(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = random_small_config(&mut rng);
    let model = LdCvaeModel::new(config.clone(), seed).map_err(|e| e.to_string())?;
    let m = rng.random_range(2..10);
    let patient = random_patient(&mut rng, &config, m);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let shuffled = permuted_rows(&patient.bag, &order);
    let mut worst: f64 = 0.0;
    for genomics in [patient.genomics.as_deref(), None] {
        let a = model
            .predict(PatientView { bag: &patient.bag, genomics })
            .map_err(|e| e.to_string())?;
        let b = model
            .predict(PatientView { bag: &shuffled, genomics })
            .map_err(|e| e.to_string())?;
        worst = worst.max((a.output.risk() - b.output.risk()).abs());
    }
    Ok(worst)
}

/// Largest deviation from 1 of any attention or pooling row sum.
pub fn attention_row_error(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = random_small_config(&mut rng);
    let model = LdCvaeModel::new(config.clone(), seed).map_err(|e| e.to_string())?;
    let m = rng.random_range(1..12);
    let patient = random_patient(&mut rng, &config, m);
    let mut worst: f64 = 0.0;
    let mut rows = |t: &Tensor| {
        let (r, _) = t.dims2();
        for i in 0..r {
            worst = worst.max((t.row_slice(i).iter().sum::<f64>() - 1.0).abs());
        }
    };
    for genomics in [patient.genomics.as_deref(), None] {
        let p = model
            .predict(PatientView { bag: &patient.bag, genomics })
            .map_err(|e| e.to_string())?;
        p.coattention.iter().for_each(&mut rows);
        p.encoder_attention.iter().for_each(&mut rows);
    }
    let mut store = ParamStore::new();
    let pool = AttnPool::new(&mut store, &mut rng, "pool", 6, 4);
    let mut s = Session::new(&store, false);
    let x = s.g.constant(
        Tensor::new(vec![m, 6], (0..m * 6).map(|_| StandardNormal.sample(&mut rng)).collect()).map_err(|e| e.to_string())?,
    );
    let (_, weights) = pool.pool(&mut s, x).map_err(|e| e.to_string())?;
    rows(s.g.value(weights));
    Ok(worst)
}

/// Largest gap between reported totals and the sum of their parts.
pub fn additivity_error(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = random_small_config(&mut rng);
    let model = LdCvaeModel::new(config.clone(), seed).map_err(|e| e.to_string())?;
    let patient = random_patient(&mut rng, &config, 3);
    let mut s = Session::new(&model.store, true);
    let mut noise = NoiseSource::new(seed);
    let view = PatientView {
        bag: &patient.bag,
        genomics: patient.genomics.as_deref(),
    };
    let (_, report) = model
        .loss_vars(&mut s, view, &patient.label, rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), &mut noise)
        .map_err(|e| e.to_string())?;
    let ld = report.ld.as_ref().ok_or("missing ld-cvae report")?;
    Ok((report.total - report.recomposed()).abs().max((ld.total - ld.recomposed()).abs()))
}

/// Parameters after one optimizer step from per-patient accumulated
/// gradients versus one step from the gradient of the summed loss.
pub fn accumulation_gap(seed: u64, patients: usize) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = random_small_config(&mut rng);
    let model = LdCvaeModel::new(config.clone(), seed).map_err(|e| e.to_string())?;
    let batch: Vec<PatientRecord> = (0..patients)
        .map(|_| {
            let m = rng.random_range(1..5);
            random_patient(&mut rng, &config, m)
        })
        .collect();
    fn view(r: &PatientRecord) -> PatientView<'_> {
        PatientView {
            bag: &r.bag,
            genomics: r.genomics.as_deref(),
        }
    }
    let (beta, alpha) = (0.3, 0.1);

    let mut noise = NoiseSource::new(seed);
    let mut accumulated = model.store.zeros_like();
    for r in &batch {
        let mut s = Session::new(&model.store, true);
        let (vars, _) = model.loss_vars(&mut s, view(r), &r.label, beta, alpha, &mut noise).map_err(|e| e.to_string())?;
        s.g.backward(vars.total).map_err(|e| e.to_string())?;
        s.accumulate_grads(&mut accumulated);
    }

    let mut noise = NoiseSource::new(seed);
    let mut s = Session::new(&model.store, true);
    let mut sum: Option<Var> = None;
    for r in &batch {
        let (vars, _) = model.loss_vars(&mut s, view(r), &r.label, beta, alpha, &mut noise).map_err(|e| e.to_string())?;
        sum = Some(match sum {
            Some(acc) => s.g.add(acc, vars.total).map_err(|e| e.to_string())?,
            None => vars.total,
        });
    }
    s.g.backward(sum.ok_or("empty batch")?).map_err(|e| e.to_string())?;
    let mut summed = model.store.zeros_like();
    s.accumulate_grads(&mut summed);

    let step = |grads: &[Tensor]| {
        let mut store = model.store.clone();
        let mut opt = AdamW::new(&store, (0.9, 0.999), 1e-8);
        opt.step(&mut store, grads, 2e-4, 1e-5);
        store
    };
    let (a, b) = (step(&accumulated), step(&summed));
    let mut worst: f64 = 0.0;
    for ((pa, pb), (ga, gb)) in a.params().iter().zip(b.params()).zip(accumulated.iter().zip(&summed)) {
        worst = worst.max(max_abs_diff(pa.value.data(), pb.value.data()));
        let scale = gb.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(max_abs_diff(ga.data(), gb.data()) / scale);
    }
    Ok(worst)
}

/// Criterion 10: permutation invariance, attention normalization, loss
/// additivity and gradient-accumulation equivalence.
pub fn invariance_suite() -> CriterionOutcome {
    timed(10, "invariance suite", || {
        let mut enc: f64 = 0.0;
        let mut e2e: f64 = 0.0;
        let mut rows: f64 = 0.0;
        let mut add: f64 = 0.0;
        for seed in 0..10 {
            enc = enc.max(encoder_permutation_drift(seed)?);
            e2e = e2e.max(end_to_end_permutation_drift(seed)?);
            rows = rows.max(attention_row_error(seed)?);
            add = add.max(additivity_error(seed)?);
        }
        let acc = accumulation_gap(7, 32)?;
        let passed = enc < 1e-10 && e2e < 1e-10 && rows < 1e-12 && add < 1e-10 && acc < 1e-9;
        Ok((
            passed,
            format!(
                "encoder drift {enc:.1e}, risk drift {e2e:.1e} (< 1e-10); row sums {rows:.1e} (< 1e-12); additivity {add:.1e} (< 1e-10); accumulation {acc:.1e} (< 1e-9)"
            ),
        ))
    })
}

/// Criteria that need no training: 1 to 5 and 10.
pub fn quick_checks() -> Vec<CriterionOutcome> {
    vec![
        poe_correctness(),
        gradient_suite(),
        c_index_oracle(),
        nll_goldens(),
        logrank_golden(),
        invariance_suite(),
    ]
}

/// Criteria 6 to 9 from one set of reference runs.
pub fn reference_checks(runs: &ReferenceRuns) -> Vec<CriterionOutcome> {
    vec![
        reference_accuracy(runs),
        missing_rate_monotone(runs),
        alignment_efficacy(runs),
        determinism(runs),
    ]
}
