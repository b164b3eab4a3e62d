use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ldcvae::check::{quick_checks, reference_checks, reference_runs, CriterionOutcome};
use ldcvae::data::{generate_cohort, mask_genomics, read_cohort, write_cohort, Cohort, CohortSpec};
use ldcvae::fusion::write_coattention_csv;
use ldcvae::model::LdCvaeModel;
use ldcvae::pipeline::{
    coattention_swap_report, evaluate, rebin, run_cv, train_fold, write_summary_csv, CvOptions, TrainConfig,
};
use ldcvae::survival::{assign_bins, km_svg, write_km_csv};
use log::info;

#[derive(Parser)]
#[command(name = "ldcvae", version, about = "Multimodal survival prediction with missing genomics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort directory.
    Simulate {
        /// Cohort settings as JSON; defaults apply to omitted fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every patient of a cohort and write a checkpoint.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        /// Training configuration as JSON; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON-lines file receiving one loss record per optimizer step.
        #[arg(long)]
        steps: Option<PathBuf>,
    },
    /// Score a cohort with a checkpoint and write per-patient risks.
    Eval {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Fraction of patients whose genomics are removed before scoring.
        #[arg(long, default_value_t = 0.0)]
        missing_rate: f64,
        #[arg(long, default_value_t = 17)]
        mask_seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Five-fold cross-validation with complete and missing genomics.
    Cv {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Folds trained concurrently.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Instances compared per category in the co-attention swap report.
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Run the oracle suites; `--reference` adds the cross-validation runs.
    Check {
        #[arg(long)]
        reference: bool,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load_cohort(dir: &Path) -> Result<Cohort> {
    read_cohort(dir).with_context(|| format!("reading cohort {}", dir.display()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

/// Aligns model input sizes with the cohort so configs need not repeat them.
fn fit_to_cohort(config: &mut TrainConfig, cohort: &Cohort) {
    config.model.path_dim = cohort.spec.path_dim;
    config.model.genomic_schema = cohort.spec.schema();
    config.model.bins = cohort.spec.bins;
}

fn simulate(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec: CohortSpec = read_json(spec)?;
    let cohort = generate_cohort(&spec)?;
    write_cohort(&cohort, out)?;
    let censored = cohort.records.iter().filter(|r| r.label.censored).count();
    println!(
        "wrote {} patients ({censored} censored) to {}",
        cohort.records.len(),
        out.display()
    );
    Ok(())
}

fn train(cohort: &Path, config: Option<&Path>, out: &Path, steps: Option<&Path>) -> Result<()> {
    let cohort = load_cohort(cohort)?;
    let mut config: TrainConfig = read_json(config)?;
    fit_to_cohort(&mut config, &cohort);
    let mut sink = steps.map(create).transpose()?;
    let outcome = train_fold(&cohort.records, &config, sink.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(mut w) = sink {
        w.flush()?;
    }
    outcome.model.save(out)?;
    let last = outcome.trace.last().map_or(f64::NAN, |s| s.total);
    println!("trained {} steps, final loss {last:.4}; checkpoint {}", outcome.trace.len(), out.display());
    Ok(())
}

fn eval(cohort: &Path, ckpt: &Path, missing_rate: f64, mask_seed: u64, report: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&missing_rate) {
        bail!("missing rate {missing_rate} outside [0, 1]");
    }
    let cohort = load_cohort(cohort)?;
    let model = LdCvaeModel::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let records = mask_genomics(&cohort.records, missing_rate, mask_seed);
    let result = evaluate(&model, &records)?;
    let mut out = create(report)?;
    writeln!(out, "patient,risk,time_months,censored,has_genomics,group")?;
    for (rec, risk) in records.iter().zip(&result.risks) {
        let group = if result.groups.high.contains(&rec.id) { "high" } else { "low" };
        writeln!(
            out,
            "{},{risk},{},{},{},{group}",
            rec.id,
            rec.label.time_months,
            rec.label.censored,
            rec.genomics.is_some()
        )?;
    }
    out.flush()?;
    let p = result.groups.logrank_p.map_or("n/a".to_string(), |p| format!("{p:.3e}"));
    println!("c-index {:.4}, log-rank p {p}", result.c_index);
    Ok(())
}

fn cv(cohort: &Path, config: Option<&Path>, report: &Path, threads: usize, top_k: usize) -> Result<()> {
    let cohort = load_cohort(cohort)?;
    let mut config: TrainConfig = read_json(config)?;
    fit_to_cohort(&mut config, &cohort);
    let options = CvOptions {
        threads,
        ..CvOptions::default()
    };
    let outcome = run_cv(&cohort, &config, &options)?;
    fs::create_dir_all(report)?;

    let mut folds = create(&report.join("folds.csv"))?;
    writeln!(folds, "fold,c_index_complete,c_index_missing,logrank_p_complete,logrank_p_missing")?;
    let fmt_p = |p: Option<f64>| p.map_or(String::new(), |p| p.to_string());
    for f in &outcome.folds {
        writeln!(
            folds,
            "{},{},{},{},{}",
            f.fold,
            f.c_index_complete,
            f.c_index_missing,
            fmt_p(f.logrank_p_complete),
            fmt_p(f.logrank_p_missing)
        )?;
    }
    folds.flush()?;
    write_summary_csv(create(&report.join("summary.csv"))?, &outcome.folds)?;

    let mut losses = create(&report.join("loss_trace.csv"))?;
    writeln!(losses, "fold,epoch,total,surv,vib,ld,align")?;
    for f in &outcome.folds {
        for e in &f.loss_trace {
            writeln!(losses, "{},{},{},{},{},{},{}", f.fold, e.epoch, e.total, e.surv, e.vib, e.ld, e.align)?;
        }
    }
    losses.flush()?;

    for f in &outcome.folds {
        for (mode, groups) in [("complete", &f.groups_complete), ("missing", &f.groups_missing)] {
            let curves = [("high", &groups.km_high), ("low", &groups.km_low)];
            write_km_csv(create(&report.join(format!("km_fold{}_{mode}.csv", f.fold)))?, &curves)?;
            let title = format!("fold {} ({mode} genomics)", f.fold);
            fs::write(report.join(format!("km_fold{}_{mode}.svg", f.fold)), km_svg(&curves, &title))?;
        }
    }

    let mut coattn = create(&report.join("coattention.csv"))?;
    let mut swap = create(&report.join("coattention_swap.csv"))?;
    writeln!(swap, "fold,patient,instances,mean_top_k_overlap")?;
    let mut header = true;
    for (fold, model) in outcome.models.iter().enumerate() {
        let train: Vec<_> = cohort.records.iter().filter(|r| r.fold != fold).collect();
        let times: Vec<f64> = train.iter().map(|r| r.label.time_months).collect();
        let censored: Vec<bool> = train.iter().map(|r| r.label.censored).collect();
        let (_, edges) = assign_bins(&times, &censored, config.model.bins)?;
        let held: Vec<_> = cohort.records.iter().filter(|r| r.fold == fold).cloned().collect();
        let held = rebin(&held, &edges);
        for (id, weights) in evaluate(model, &held)?.coattention {
            write_coattention_csv(&mut coattn, &id, &weights, header)?;
            header = false;
        }
        for c in coattention_swap_report(model, &held, top_k)? {
            writeln!(swap, "{fold},{},{},{}", c.id, c.instances, c.mean_top_k_overlap)?;
        }
    }
    coattn.flush()?;
    swap.flush()?;

    let s = &outcome.summary;
    println!(
        "complete {:.4} ± {:.4}; missing {:.4} ± {:.4}; reports in {}",
        s.complete.mean,
        s.complete.std,
        s.missing.mean,
        s.missing.std,
        report.display()
    );
    Ok(())
}

fn check(reference: bool, threads: usize) -> Result<bool> {
    let mut outcomes: Vec<CriterionOutcome> = quick_checks();
    for o in &outcomes {
        println!("{o}");
    }
    if reference {
        info!("running reference cross-validation");
        let runs = reference_runs(threads)?;
        for o in reference_checks(&runs) {
            println!("{o}");
            outcomes.push(o);
        }
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed} of {} checks passed", outcomes.len());
    Ok(passed == outcomes.len())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { spec, out } => simulate(spec.as_deref(), &out)?,
        Command::Train {
            cohort,
            config,
            out,
            steps,
        } => train(&cohort, config.as_deref(), &out, steps.as_deref())?,
        Command::Eval {
            cohort,
            ckpt,
            missing_rate,
            mask_seed,
            report,
        } => eval(&cohort, &ckpt, missing_rate, mask_seed, &report)?,
        Command::Cv {
            cohort,
            config,
            report,
            threads,
            top_k,
        } => cv(&cohort, config.as_deref(), &report, threads, top_k)?,
        Command::Check { reference, threads } => return check(reference, threads),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
