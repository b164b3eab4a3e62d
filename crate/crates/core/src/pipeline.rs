//! Training, evaluation and cross-validation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{mask_genomics, Cohort, PatientRecord, FOLDS};
use crate::diff::Tensor;
use crate::fusion::top_k;
use crate::gaussian::NoiseSource;
use crate::model::{LdCvaeModel, ModelConfig, ModelError, PatientView, StepReport};
use crate::nn::{ParamStore, Session};
use crate::survival::{
    assign_bins, c_index, km_curve, logrank_test, stratify_median, BinEdges, KmCurve, SurvivalError, SurvivalLabel,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("report i/o")]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("fold {0} has no patients")]
    EmptyFold(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Patients whose gradients are summed before each optimizer step.
    pub accumulation_steps: usize,
    pub alpha: f64,
    /// Length of the cosine KL warmup in optimizer steps; `None` means one epoch.
    pub beta_warmup_steps: Option<usize>,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-4,
            weight_decay: 1e-5,
            accumulation_steps: 32,
            alpha: 0.1,
            beta_warmup_steps: None,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 7,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.epochs == 0 || self.accumulation_steps == 0 {
            return bad("epochs and accumulation_steps must be positive");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.alpha >= 0.0) {
            return bad("lr, weight_decay and alpha must be non-negative");
        }
        if self.beta_warmup_steps == Some(0) {
            return bad("beta_warmup_steps must be positive");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, patients: usize) -> usize {
        patients.div_ceil(self.accumulation_steps)
    }
}

/// Cosine KL warmup: `0.5 (1 − cos(π · min(step / warmup, 1)))`.
pub fn beta_at(step: usize, warmup_steps: usize) -> f64 {
    let progress = (step as f64 / warmup_steps.max(1) as f64).min(1.0);
    0.5 * (1.0 - (std::f64::consts::PI * progress).cos())
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl AdamW {
    pub fn new(store: &ParamStore, betas: (f64, f64), eps: f64) -> Self {
        Self {
            m: store.zeros_like(),
            v: store.zeros_like(),
            t: 0,
            betas,
            eps,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in store.params_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let p = p.value.data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p -= lr * (update + weight_decay * *p);
            }
        }
    }
}

/// Mean loss terms over the patients of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub beta: f64,
    pub patients: usize,
    pub surv: f64,
    pub vib: f64,
    pub ld: f64,
    pub recon: f64,
    pub kl_joint: f64,
    pub kl_specific: f64,
    pub align: f64,
    pub total: f64,
}

impl StepRecord {
    fn from_reports(epoch: usize, step: usize, beta: f64, reports: &[StepReport]) -> Self {
        let n = reports.len() as f64;
        let mean = |f: &dyn Fn(&StepReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let ld = |f: &dyn Fn(&crate::ldcvae::LdCvaeLossReport) -> f64| mean(&|r| r.ld.as_ref().map_or(0.0, f));
        Self {
            epoch,
            step,
            beta,
            patients: reports.len(),
            surv: mean(&|r| r.surv),
            vib: mean(&|r| r.vib.total),
            ld: ld(&|l| l.total),
            recon: ld(&|l| l.recon.iter().sum()),
            kl_joint: ld(&|l| l.kl_joint),
            kl_specific: ld(&|l| l.kl_specific.iter().sum()),
            align: ld(&|l| l.align),
            total: mean(&|r| r.total),
        }
    }
}

/// Mean loss terms over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub surv: f64,
    pub vib: f64,
    pub ld: f64,
    pub align: f64,
}

pub fn epoch_losses(trace: &[StepRecord]) -> Vec<EpochLoss> {
    let epochs = trace.iter().map(|s| s.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let steps: Vec<&StepRecord> = trace.iter().filter(|s| s.epoch == e).collect();
            let n: usize = steps.iter().map(|s| s.patients).sum();
            let avg = |f: &dyn Fn(&StepRecord) -> f64| steps.iter().map(|s| f(s) * s.patients as f64).sum::<f64>() / n as f64;
            EpochLoss {
                epoch: e,
                total: avg(&|s| s.total),
                surv: avg(&|s| s.surv),
                vib: avg(&|s| s.vib),
                ld: avg(&|s| s.ld),
                align: avg(&|s| s.align),
            }
        })
        .collect()
}

pub struct TrainOutcome {
    pub model: LdCvaeModel,
    pub trace: Vec<StepRecord>,
    pub edges: BinEdges,
}

/// Re-bins labels with edges fitted on the training patients.
pub fn rebin(records: &[PatientRecord], edges: &BinEdges) -> Vec<PatientRecord> {
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.label.bin = edges.bin_of(r.label.time_months);
            r
        })
        .collect()
}

/// Trains a fresh model on complete training patients. Gradients of
/// `accumulation_steps` patients are summed before each optimizer step.
/// One JSON line per optimizer step is written to `reports` when given.
pub fn train_fold(
    train: &[PatientRecord],
    config: &TrainConfig,
    mut reports: Option<&mut dyn Write>,
) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    let times: Vec<f64> = train.iter().map(|r| r.label.time_months).collect();
    let censored: Vec<bool> = train.iter().map(|r| r.label.censored).collect();
    let (_, edges) = assign_bins(&times, &censored, config.model.bins)?;
    let train = rebin(train, &edges);

    let mut model = LdCvaeModel::new(config.model.clone(), config.seed)?;
    let mut optimizer = AdamW::new(&model.store, config.adam_betas, config.adam_eps);
    let mut noise = NoiseSource::new(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let dropout_seed = config.seed.wrapping_mul(0xd1b5_4a32_d192_ed03);
    let warmup = config.beta_warmup_steps.unwrap_or_else(|| config.steps_per_epoch(train.len()));
    let mut trace = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.accumulation_steps) {
            let beta = beta_at(step, warmup);
            let mut grads = model.store.zeros_like();
            let mut step_reports = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let rec = &train[i];
                let view = PatientView {
                    bag: &rec.bag,
                    genomics: rec.genomics.as_deref(),
                };
                let mask_seed = dropout_seed ^ ((step as u64) << 20) ^ i as u64;
                let mut s = Session::new(&model.store, true).with_dropout(config.model.dropout, mask_seed);
                let (vars, report) = model.loss_vars(&mut s, view, &rec.label, beta, config.alpha, &mut noise)?;
                s.g.backward(vars.total).map_err(ModelError::from)?;
                s.accumulate_grads(&mut grads);
                step_reports.push(report);
            }
            optimizer.step(&mut model.store, &grads, config.lr, config.weight_decay);
            let record = StepRecord::from_reports(epoch, step, beta, &step_reports);
            if let Some(out) = reports.as_deref_mut() {
                serde_json::to_writer(&mut *out, &record)?;
                writeln!(out)?;
            }
            log::debug!("epoch {epoch} step {step} beta {beta:.3} loss {:.4}", record.total);
            trace.push(record);
            step += 1;
        }
    }
    Ok(TrainOutcome { model, trace, edges })
}

/// Kaplan–Meier curves of the two median-split risk groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskGroups {
    pub high: Vec<String>,
    pub low: Vec<String>,
    pub km_high: KmCurve,
    pub km_low: KmCurve,
    pub logrank_p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub c_index: f64,
    pub risks: Vec<f64>,
    pub groups: RiskGroups,
    /// Per-patient co-attention weights (id, `6 × M` matrix).
    pub coattention: Vec<(String, Tensor)>,
}

/// Scores every record. Records without genomics go through the
/// reconstruction path; genomic inputs of such records do not exist, so
/// they cannot be read.
pub fn evaluate(model: &LdCvaeModel, records: &[PatientRecord]) -> Result<EvalResult, PipelineError> {
    let mut risks = Vec::with_capacity(records.len());
    let mut coattention = Vec::new();
    for rec in records {
        let pred = model.predict(PatientView {
            bag: &rec.bag,
            genomics: rec.genomics.as_deref(),
        })?;
        risks.push(pred.output.risk());
        if let Some(w) = pred.coattention {
            coattention.push((rec.id.clone(), w));
        }
    }
    let labels: Vec<SurvivalLabel> = records.iter().map(|r| r.label.clone()).collect();
    let c = c_index(&risks, &labels)?;
    let (high, low) = stratify_median(&risks);
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i].clone()).collect::<Vec<_>>();
    let (high_labels, low_labels) = (pick(&high), pick(&low));
    let logrank_p = logrank_test(&high_labels, &low_labels).ok().map(|r| r.p_value);
    let ids = |idx: &[usize]| idx.iter().map(|&i| records[i].id.clone()).collect();
    Ok(EvalResult {
        c_index: c,
        risks,
        groups: RiskGroups {
            high: ids(&high),
            low: ids(&low),
            km_high: km_curve(&high_labels),
            km_low: km_curve(&low_labels),
            logrank_p,
        },
        coattention,
    })
}

/// Evaluates with the genomics of a fraction `eta` of the records removed.
pub fn evaluate_missing_rate(
    model: &LdCvaeModel,
    records: &[PatientRecord],
    eta: f64,
    mask_seed: u64,
) -> Result<EvalResult, PipelineError> {
    evaluate(model, &mask_genomics(records, eta, mask_seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub c_index_complete: f64,
    pub c_index_missing: f64,
    pub loss_trace: Vec<EpochLoss>,
    pub groups_complete: RiskGroups,
    pub groups_missing: RiskGroups,
    pub logrank_p_complete: Option<f64>,
    pub logrank_p_missing: Option<f64>,
    /// `(η, C-index)` pairs of the missing-rate sweep.
    pub eta_sweep: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Arithmetic mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub complete: MeanStd,
    pub missing: MeanStd,
    pub eta_sweep: Vec<(f64, MeanStd)>,
}

pub struct CvOutcome {
    pub folds: Vec<FoldResult>,
    pub summary: CvSummary,
    /// Step traces per fold, in fold order.
    pub traces: Vec<Vec<StepRecord>>,
    pub models: Vec<LdCvaeModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvOptions {
    pub etas: Vec<f64>,
    /// Folds trained concurrently; each fold is sequential and deterministic.
    pub threads: usize,
    pub mask_seed: u64,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            etas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            threads: 1,
            mask_seed: 17,
        }
    }
}

fn run_fold(cohort: &Cohort, fold: usize, config: &TrainConfig, options: &CvOptions) -> Result<(FoldResult, Vec<StepRecord>, LdCvaeModel), PipelineError> {
    let train: Vec<PatientRecord> = cohort.records.iter().filter(|r| r.fold != fold).cloned().collect();
    let test: Vec<PatientRecord> = cohort.records.iter().filter(|r| r.fold == fold).cloned().collect();
    if train.is_empty() || test.is_empty() {
        return Err(PipelineError::EmptyFold(fold));
    }
    let outcome = train_fold(&train, config, None)?;
    let test = rebin(&test, &outcome.edges);
    let complete = evaluate(&outcome.model, &test)?;
    let missing = evaluate_missing_rate(&outcome.model, &test, 1.0, options.mask_seed)?;
    let mut eta_sweep = Vec::with_capacity(options.etas.len());
    for &eta in &options.etas {
        let c = if eta == 0.0 {
            complete.c_index
        } else if eta == 1.0 {
            missing.c_index
        } else {
            evaluate_missing_rate(&outcome.model, &test, eta, options.mask_seed)?.c_index
        };
        eta_sweep.push((eta, c));
    }
    log::info!("fold {fold}: complete {:.4} missing {:.4}", complete.c_index, missing.c_index);
    let result = FoldResult {
        fold,
        c_index_complete: complete.c_index,
        c_index_missing: missing.c_index,
        loss_trace: epoch_losses(&outcome.trace),
        logrank_p_complete: complete.groups.logrank_p,
        logrank_p_missing: missing.groups.logrank_p,
        groups_complete: complete.groups,
        groups_missing: missing.groups,
        eta_sweep,
    };
    Ok((result, outcome.trace, outcome.model))
}

/// Five-fold cross-validation: train on four folds, evaluate the held-out
/// fold with complete genomics, without genomics, and along the η sweep.
pub fn run_cv(cohort: &Cohort, config: &TrainConfig, options: &CvOptions) -> Result<CvOutcome, PipelineError> {
    let threads = options.threads.clamp(1, FOLDS);
    let mut results: Vec<Option<Result<_, PipelineError>>> = (0..FOLDS).map(|_| None).collect();
    if threads == 1 {
        for (fold, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_fold(cohort, fold, config, options));
        }
    } else {
        for group in (0..FOLDS).collect::<Vec<_>>().chunks(threads) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = group
                    .iter()
                    .map(|&fold| (fold, scope.spawn(move || run_fold(cohort, fold, config, options))))
                    .collect();
                for (fold, h) in handles {
                    results[fold] = Some(h.join().expect("fold worker panicked"));
                }
            });
        }
    }
    let mut folds = Vec::with_capacity(FOLDS);
    let mut traces = Vec::with_capacity(FOLDS);
    let mut models = Vec::with_capacity(FOLDS);
    for r in results {
        let (f, t, m) = r.expect("every fold ran")?;
        folds.push(f);
        traces.push(t);
        models.push(m);
    }
    let summary = summarize(&folds);
    Ok(CvOutcome {
        folds,
        summary,
        traces,
        models,
    })
}

pub fn summarize(folds: &[FoldResult]) -> CvSummary {
    let complete: Vec<f64> = folds.iter().map(|f| f.c_index_complete).collect();
    let missing: Vec<f64> = folds.iter().map(|f| f.c_index_missing).collect();
    let etas: Vec<f64> = folds.first().map(|f| f.eta_sweep.iter().map(|e| e.0).collect()).unwrap_or_default();
    let eta_sweep = etas
        .iter()
        .enumerate()
        .map(|(k, &eta)| (eta, MeanStd::of(&folds.iter().map(|f| f.eta_sweep[k].1).collect::<Vec<_>>())))
        .collect();
    CvSummary {
        complete: MeanStd::of(&complete),
        missing: MeanStd::of(&missing),
        eta_sweep,
    }
}

/// Summary table: one row per evaluation mode, mean ± std and per-fold values.
pub fn write_summary_csv<W: Write>(mut out: W, folds: &[FoldResult]) -> std::io::Result<()> {
    let summary = summarize(folds);
    write!(out, "mode,c_index_mean,c_index_std")?;
    for f in folds {
        write!(out, ",fold_{}", f.fold)?;
    }
    writeln!(out)?;
    for (mode, stats, pick) in [
        ("complete", &summary.complete, (|f: &FoldResult| f.c_index_complete) as fn(&FoldResult) -> f64),
        ("missing", &summary.missing, |f: &FoldResult| f.c_index_missing),
    ] {
        write!(out, "{mode},{},{}", stats.mean, stats.std)?;
        for f in folds {
            write!(out, ",{}", pick(f))?;
        }
        writeln!(out)?;
    }
    for (eta, stats) in &summary.eta_sweep {
        write!(out, "eta={eta},{},{}", stats.mean, stats.std)?;
        for f in folds {
            let c = f.eta_sweep.iter().find(|e| e.0 == *eta).map_or(f64::NAN, |e| e.1);
            write!(out, ",{c}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Per-patient comparison of co-attention computed from genuine versus
/// reconstructed genomic embeddings: mean top-k instance overlap across the
/// six categories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapComparison {
    pub id: String,
    pub instances: usize,
    pub mean_top_k_overlap: f64,
}

pub fn coattention_swap_report(model: &LdCvaeModel, records: &[PatientRecord], k: usize) -> Result<Vec<SwapComparison>, PipelineError> {
    let mut out = Vec::new();
    for rec in records {
        let Some(genes) = rec.genomics.as_deref() else { continue };
        let genuine = model.predict(PatientView {
            bag: &rec.bag,
            genomics: Some(genes),
        })?;
        let generated = model.predict(PatientView {
            bag: &rec.bag,
            genomics: None,
        })?;
        let (Some(a), Some(b)) = (genuine.coattention, generated.coattention) else { continue };
        let (rows, cols) = a.dims2();
        let kk = k.min(cols);
        let overlap: f64 = (0..rows)
            .map(|r| {
                let ta = top_k(a.row_slice(r), kk);
                let tb = top_k(b.row_slice(r), kk);
                ta.iter().filter(|i| tb.contains(i)).count() as f64 / kk as f64
            })
            .sum::<f64>()
            / rows as f64;
        out.push(SwapComparison {
            id: rec.id.clone(),
            instances: cols,
            mean_top_k_overlap: overlap,
        });
    }
    Ok(out)
}
