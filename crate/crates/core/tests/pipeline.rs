use ldcvae::check::{accumulation_gap, reference_cohort};
use ldcvae::data::{generate_cohort, CohortSpec, PatientRecord, FOLDS};
use ldcvae::model::{LdCvaeModel, ModelConfig};
use ldcvae::pipeline::{epoch_losses, evaluate, run_cv, train_fold, CvOptions, MeanStd, StepRecord, TrainConfig};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        latent: 4,
        path_dim: 6,
        genomic_dim: 6,
        genomic_schema: vec![4; 6],
        ffn_hidden: 16,
        pool_hidden: 4,
        ..ModelConfig::default()
    }
}

fn tiny_cohort(n: usize, signal: f64, seed: u64) -> Vec<PatientRecord> {
    generate_cohort(&CohortSpec {
        n_patients: n,
        bag_size_range: [3, 6],
        path_dim: 6,
        genomic_dim: 4,
        signal_strength: signal,
        seed,
        ..CohortSpec::default()
    })
    .unwrap()
    .records
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-3,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let train = tiny_cohort(40, 1.5, 1);
    let config = TrainConfig {
        lr: 0.0,
        weight_decay: 0.0,
        ..tiny_config(2)
    };
    let out = train_fold(&train, &config, None).unwrap();
    let fresh = LdCvaeModel::new(config.model.clone(), config.seed).unwrap();
    for (a, b) in out.model.store.params().iter().zip(fresh.store.params()) {
        let bits = |p: &ldcvae::nn::Param| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{}", a.name);
    }
}

#[test]
fn training_is_deterministic() {
    let train = tiny_cohort(40, 1.5, 2);
    let config = tiny_config(2);
    let mut log_a = Vec::new();
    let mut log_b = Vec::new();
    let a = train_fold(&train, &config, Some(&mut log_a)).unwrap();
    let b = train_fold(&train, &config, Some(&mut log_b)).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.model.store, b.model.store);
    assert_eq!(log_a, log_b);
    let lines: Vec<StepRecord> = std::str::from_utf8(&log_a)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, a.trace);
    for r in &a.trace {
        assert!((r.total - (r.surv + r.vib + r.ld)).abs() < 1e-10, "step {}", r.step);
    }
}

#[test]
fn one_optimizer_step_per_accumulation_chunk() {
    let train = tiny_cohort(70, 1.5, 3);
    let out = train_fold(&train, &tiny_config(2), None).unwrap();
    assert_eq!(out.trace.len(), 70usize.div_ceil(32) * 2);
    let per_step: Vec<usize> = out.trace.iter().map(|s| s.patients).collect();
    assert_eq!(per_step, vec![32, 32, 6, 32, 32, 6]);
    let epochs = epoch_losses(&out.trace);
    assert_eq!(epochs.len(), 2);
}

#[test]
fn first_steps_have_small_kl_weight() {
    let train = tiny_cohort(70, 1.5, 3);
    let out = train_fold(&train, &tiny_config(2), None).unwrap();
    assert_eq!(out.trace[0].beta, 0.0);
    assert!(out.trace.windows(2).all(|w| w[0].beta <= w[1].beta));
    assert_eq!(out.trace.last().unwrap().beta, 1.0);
}

#[test]
fn evaluation_has_no_side_effects() {
    let records = tiny_cohort(30, 1.5, 4);
    let model = LdCvaeModel::new(tiny_model(), 4).unwrap();
    let before = (model.store.clone(), records.clone());
    let a = evaluate(&model, &records).unwrap();
    let b = evaluate(&model, &records).unwrap();
    assert_eq!(a.risks, b.risks);
    assert_eq!(a.c_index, b.c_index);
    assert_eq!((model.store.clone(), records), before);
}

#[test]
fn accumulated_gradients_match_a_summed_loss() {
    for seed in 0..3 {
        let gap = accumulation_gap(seed, 32).unwrap();
        assert!(gap < 1e-9, "seed {seed}: {gap}");
    }
}

#[test]
fn cross_validation_partitions_the_cohort_and_summarizes() {
    let cohort = generate_cohort(&CohortSpec {
        n_patients: 50,
        bag_size_range: [3, 5],
        path_dim: 6,
        genomic_dim: 4,
        ..CohortSpec::default()
    })
    .unwrap();
    let out = run_cv(&cohort, &tiny_config(1), &CvOptions::default()).unwrap();
    assert_eq!(out.folds.len(), FOLDS);
    let mut seen: Vec<String> = Vec::new();
    for (k, f) in out.folds.iter().enumerate() {
        assert_eq!(f.fold, k);
        let mut ids: Vec<String> = f.groups_complete.high.iter().chain(&f.groups_complete.low).cloned().collect();
        ids.sort();
        let mut expect: Vec<String> = cohort.records.iter().filter(|r| r.fold == k).map(|r| r.id.clone()).collect();
        expect.sort();
        assert_eq!(ids, expect);
        seen.extend(ids);
        assert_eq!(f.eta_sweep.first().unwrap().1, f.c_index_complete);
        assert_eq!(f.eta_sweep.last().unwrap().1, f.c_index_missing);
    }
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 50);

    let complete: Vec<f64> = out.folds.iter().map(|f| f.c_index_complete).collect();
    let mean = complete.iter().sum::<f64>() / 5.0;
    assert!((out.summary.complete.mean - mean).abs() < 1e-15);
    let expect = MeanStd::of(&out.folds.iter().map(|f| f.c_index_missing).collect::<Vec<_>>());
    assert_eq!(out.summary.missing, expect);
}

#[test]
fn mean_std_of_known_values() {
    let s = MeanStd::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!(s.mean, 5.0);
    assert_eq!(s.std, 2.0);
}

#[test]
fn untrained_model_is_at_chance_on_null_data() {
    let records = tiny_cohort(1000, 0.0, 7);
    let model = LdCvaeModel::new(tiny_model(), 7).unwrap();
    let c = evaluate(&model, &records).unwrap().c_index;
    assert!((c - 0.5).abs() < 0.05, "C-index {c}");
}

#[test]
fn missing_mode_needs_no_genomic_inputs() {
    let records = tiny_cohort(30, 1.5, 8);
    let model = LdCvaeModel::new(tiny_model(), 8).unwrap();
    let stripped: Vec<PatientRecord> = records
        .iter()
        .map(|r| PatientRecord {
            genomics: None,
            ..r.clone()
        })
        .collect();
    let a = evaluate(&model, &stripped).unwrap();
    let b = ldcvae::pipeline::evaluate_missing_rate(&model, &records, 1.0, 3).unwrap();
    assert_eq!(a.risks, b.risks);
    assert_eq!(a.coattention.len(), 30);
}

#[test]
fn null_signal_gives_chance_concordance() {
    let train = tiny_cohort(160, 0.0, 5);
    let held_out = tiny_cohort(1000, 0.0, 6);
    let out = train_fold(&train, &tiny_config(5), None).unwrap();
    let c = evaluate(&out.model, &held_out).unwrap().c_index;
    assert!((c - 0.5).abs() < 0.05, "C-index {c}");
}

#[test]
fn reference_training_halves_the_loss() {
    let cohort = reference_cohort().unwrap();
    let train: Vec<PatientRecord> = cohort.records.iter().filter(|r| r.fold != 0).cloned().collect();
    let out = train_fold(&train, &TrainConfig::default(), None).unwrap();
    let epochs = epoch_losses(&out.trace);
    let (first, last) = (epochs[0].total, epochs[epochs.len() - 1].total);
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}
