use ldcvae::check::{gradient_case_report, random_patient, random_small_config, LossTerm};
use ldcvae::diff::{compare_with_central_differences, DiffError, Graph, Tensor, Var};
use ldcvae::gaussian::{kl_to_standard_vars, AlignKind, DiagGaussian, GaussianVars, NoiseSource};
use ldcvae::ldcvae::{
    joint_posterior, joint_posterior_value, ldcvae_loss, FunctionDecoder, FunctionMapper, LdCvaeTerms,
};
use ldcvae::model::{LdCvaeModel, ModelConfig, PatientView};
use ldcvae::nn::{ParamStore, Session};
use ldcvae::oracle::grid_density_product;
use ldcvae::pipeline::AdamW;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> DiagGaussian {
    DiagGaussian::new(mean, var).unwrap()
}

#[test]
fn joint_of_two_standard_experts_and_prior() {
    let q = joint_posterior_value(&DiagGaussian::standard(3), Some(&DiagGaussian::standard(3))).unwrap();
    for (&m, &v) in q.mean().iter().zip(q.var()) {
        assert!(m.abs() < 1e-15);
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn joint_of_single_expert_halves_mean_and_variance() {
    let mu = vec![1.5, -0.4, 3.0];
    let q = joint_posterior_value(&gaussian(mu.clone(), vec![1.0; 3]), None).unwrap();
    for i in 0..3 {
        assert!((q.mean()[i] - mu[i] / 2.0).abs() < 1e-12);
        assert!((q.var()[i] - 0.5).abs() < 1e-12);
    }
}

#[test]
fn joint_matches_normalized_density_product() {
    let path = gaussian(vec![0.7], vec![0.6]);
    let genes = gaussian(vec![-1.1], vec![2.2]);
    let q = joint_posterior_value(&path, Some(&genes)).unwrap();
    let (m, v) = grid_density_product(&[(0.7, 0.6), (-1.1, 2.2), (0.0, 1.0)], -12.0, 12.0, 1e-3);
    assert!((q.mean()[0] - m).abs() < 1e-6);
    assert!((q.var()[0] - v).abs() < 1e-6);
}

#[test]
fn uninformative_genomic_expert_matches_missing_modality() {
    let path = gaussian(vec![0.3, -2.0, 1.1], vec![0.4, 1.7, 0.9]);
    let vague = gaussian(vec![5.0, 5.0, -5.0], vec![1e8; 3]);
    let with = joint_posterior_value(&path, Some(&vague)).unwrap();
    let without = joint_posterior_value(&path, None).unwrap();
    for i in 0..3 {
        assert!((with.mean()[i] - without.mean()[i]).abs() < 1e-4);
        assert!((with.var()[i] - without.var()[i]).abs() < 1e-4);
    }
}

#[test]
fn graph_joint_matches_value_form() {
    let path = gaussian(vec![0.3, -2.0], vec![0.4, 1.7]);
    let genes = gaussian(vec![1.0, 0.5], vec![0.2, 3.0]);
    let mut g = Graph::new();
    let p = GaussianVars::constant(&mut g, &path);
    let x = GaussianVars::constant(&mut g, &genes);
    for other in [Some(&x), None] {
        let q = joint_posterior(&mut g, &p, other).unwrap().to_value(&g).unwrap();
        let expect = joint_posterior_value(&path, other.map(|_| &genes)).unwrap();
        for i in 0..2 {
            assert!((q.mean()[i] - expect.mean()[i]).abs() < 1e-14);
            assert!((q.var()[i] - expect.var()[i]).abs() < 1e-14);
        }
    }
}

proptest! {
    #[test]
    fn joint_variance_below_each_expert(
        m in prop::collection::vec(-5.0f64..5.0, 4),
        v1 in prop::collection::vec(0.01f64..20.0, 4),
        v2 in prop::collection::vec(0.01f64..20.0, 4),
    ) {
        let path = gaussian(m.clone(), v1.clone());
        let genes = gaussian(m.iter().map(|x| -x).collect(), v2.clone());
        let q = joint_posterior_value(&path, Some(&genes)).unwrap();
        for i in 0..4 {
            prop_assert!(q.var()[i] <= v1[i].min(v2[i]).min(1.0));
            prop_assert!(q.var()[i] > 0.0);
        }
    }
}

fn mapper_outputs(mapper: &FunctionMapper, store: &ParamStore, z: &[f64]) -> Vec<DiagGaussian> {
    let mut s = Session::new(store, false);
    let z = s.g.constant(Tensor::row(z));
    let qs = mapper.differentiate_latent(&mut s, z).unwrap();
    qs.iter().map(|q| q.to_value(&s.g).unwrap()).collect()
}

#[test]
fn identical_mappers_give_identical_posteriors() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mapper = FunctionMapper::new(&mut store, &mut rng, "psi", 4, 6);
    let first: Vec<Tensor> = store.params()[..4].iter().map(|p| p.value.clone()).collect();
    for (k, p) in store.params_mut().iter_mut().enumerate() {
        p.value = first[k % 4].clone();
    }
    let qs = mapper_outputs(&mapper, &store, &[0.5, -1.0, 2.0, 0.1]);
    for q in &qs[1..] {
        assert_eq!(q, &qs[0]);
    }
}

#[test]
fn distinct_mappers_differentiate_the_latent() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mapper = FunctionMapper::new(&mut store, &mut rng, "psi", 4, 6);
    let qs = mapper_outputs(&mapper, &store, &[0.5, -1.0, 2.0, 0.1]);
    assert_ne!(qs[0], qs[1]);
}

#[test]
fn mapper_kl_gradient_wrt_latent_matches_finite_differences() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mapper = FunctionMapper::new(&mut store, &mut rng, "psi", 3, 5);
    let z0 = vec![0.37, -0.81, 1.12];
    let kl_sum = |s: &mut Session, z: Var| -> Result<Var, DiffError> {
        let qs = mapper.differentiate_latent(s, z).map_err(|e| DiffError::Invalid(e.to_string()))?;
        let mut acc = None;
        for q in &qs {
            let kl = kl_to_standard_vars(&mut s.g, q).map_err(|e| DiffError::Invalid(e.to_string()))?;
            acc = Some(match acc {
                None => kl,
                Some(a) => s.g.add(a, kl)?,
            });
        }
        Ok(acc.unwrap())
    };
    let mut s = Session::new(&store, false);
    let z = s.g.leaf(Tensor::row(&z0), true);
    let out = kl_sum(&mut s, z).unwrap();
    s.g.backward(out).unwrap();
    let analytic = s.g.grad(z).unwrap().data().to_vec();
    let err = compare_with_central_differences(
        &analytic,
        |probe| {
            let mut s = Session::new(&store, false);
            let z = s.g.constant(Tensor::row(probe));
            let out = kl_sum(&mut s, z)?;
            Ok(s.g.value(out).item())
        },
        &z0,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

fn decode(dec: &FunctionDecoder, store: &ParamStore, latents: &[Vec<f64>], z_y: &[f64]) -> Vec<Vec<f64>> {
    let mut s = Session::new(store, false);
    let qs: Vec<GaussianVars> = latents
        .iter()
        .map(|m| GaussianVars::constant(&mut s.g, &gaussian(m.clone(), vec![1.0; m.len()])))
        .collect();
    let z_y = s.g.constant(Tensor::row(z_y));
    let out = dec.reconstruct_genomics(&mut s, &qs, z_y, None).unwrap();
    out.iter().map(|&x| s.g.value(x).data().to_vec()).collect()
}

#[test]
fn each_decoder_reads_only_its_own_latent() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dec = FunctionDecoder::new(&mut store, &mut rng, "theta", 3, 8, 4);
    let mut latents: Vec<Vec<f64>> = (0..6).map(|i| vec![0.1 * i as f64, -0.3, 0.8]).collect();
    let z_y = [0.2, 0.4, -0.6];
    let before = decode(&dec, &store, &latents, &z_y);
    latents[2] = vec![4.0, 4.0, -4.0];
    let after = decode(&dec, &store, &latents, &z_y);
    for i in 0..6 {
        if i == 2 {
            assert_ne!(before[i], after[i]);
        } else {
            assert_eq!(before[i], after[i]);
        }
    }
}

#[test]
fn loss_terms_nonnegative_and_recompose() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..20 {
        let config = random_small_config(&mut rng);
        let model = LdCvaeModel::new(config.clone(), case).unwrap();
        let n = rng.random_range(1..6);
        let p = random_patient(&mut rng, &config, n);
        let beta = rng.random_range(0.0..1.0);
        let alpha = rng.random_range(0.0..2.0);
        let mut s = Session::new(&model.store, true);
        let view = PatientView {
            bag: &p.bag,
            genomics: p.genomics.as_deref(),
        };
        let (_, report) = model.loss_vars(&mut s, view, &p.label, beta, alpha, &mut NoiseSource::new(case)).unwrap();
        let ld = report.ld.unwrap();
        assert!(ld.total >= 0.0);
        assert!(ld.recon.iter().chain(&ld.kl_specific).all(|&v| v >= 0.0));
        assert!(ld.kl_joint >= 0.0 && ld.align >= 0.0);
        assert!((ld.recomposed() - ld.total).abs() <= 1e-9 * ld.total.max(1.0));
    }
}

/// Builds the objective from fixed posteriors so the terms can be set exactly.
fn fixed_loss(beta: f64, recon_offset: f64) -> (f64, f64) {
    let mut g = Graph::new();
    let genes_t = Tensor::from_rows(&(0..6).map(|i| vec![i as f64, 1.0]).collect::<Vec<_>>()).unwrap();
    let genes = g.constant(genes_t.clone());
    let path = GaussianVars::constant(&mut g, &gaussian(vec![0.5, -0.5], vec![0.8, 1.3]));
    let gene_post = GaussianVars::constant(&mut g, &gaussian(vec![0.1, 0.2], vec![0.5, 2.0]));
    let joint = joint_posterior(&mut g, &path, Some(&gene_post)).unwrap();
    let specific: Vec<GaussianVars> = (0..6)
        .map(|i| GaussianVars::constant(&mut g, &gaussian(vec![0.1 * i as f64, 0.3], vec![1.5, 0.7])))
        .collect();
    let recon: Vec<Var> = (0..6)
        .map(|i| g.constant(Tensor::row(&[i as f64 + recon_offset, 1.0])))
        .collect();
    let terms = LdCvaeTerms {
        genes,
        path_posterior: &path,
        gene_posterior: &gene_post,
        reconstructions: &recon,
        specific: &specific,
        joint: &joint,
    };
    let (_, report) = ldcvae_loss(&mut g, &terms, beta, 0.7, AlignKind::Variance).unwrap();
    (report.total, report.align)
}

#[test]
fn zero_beta_and_perfect_reconstruction_leave_alignment() {
    let (total, align) = fixed_loss(0.0, 0.0);
    assert!((total - 0.7 * align).abs() < 1e-14);
    // β = 0 makes the loss independent of the KL terms, so only the
    // reconstruction offset can move it
    let (shifted, _) = fixed_loss(0.0, 0.5);
    assert!((shifted - total - 6.0 * 0.25).abs() < 1e-12);
}

#[test]
fn reconstruction_gradient_wrt_genes_matches_finite_differences() {
    let x0: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let build = |g: &mut Graph, genes: Var| -> Result<Var, DiffError> {
        let path = GaussianVars::constant(g, &gaussian(vec![0.5, -0.5], vec![0.8, 1.3]));
        let post = GaussianVars::constant(g, &gaussian(vec![0.1, 0.2], vec![0.5, 2.0]));
        let joint = joint_posterior(g, &path, Some(&post)).map_err(|e| DiffError::Invalid(e.to_string()))?;
        let specific = vec![path; 6];
        let recon: Vec<Var> = (0..6).map(|i| g.constant(Tensor::row(&[0.2 * i as f64, -0.1]))).collect();
        let terms = LdCvaeTerms {
            genes,
            path_posterior: &path,
            gene_posterior: &post,
            reconstructions: &recon,
            specific: &specific,
            joint: &joint,
        };
        let (vars, _) =
            ldcvae_loss(g, &terms, 0.3, 1.0, AlignKind::Exact).map_err(|e| DiffError::Invalid(e.to_string()))?;
        Ok(vars.total)
    };
    let mut g = Graph::new();
    let genes = g.leaf(Tensor::new(vec![6, 2], x0.clone()).unwrap(), true);
    let loss = build(&mut g, genes).unwrap();
    g.backward(loss).unwrap();
    let analytic = g.grad(genes).unwrap().data().to_vec();
    let err = compare_with_central_differences(
        &analytic,
        |probe| {
            let mut g = Graph::new();
            let genes = g.constant(Tensor::new(vec![6, 2], probe.to_vec())?);
            let out = build(&mut g, genes)?;
            Ok(g.value(out).item())
        },
        &x0,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn full_objective_parameter_gradients_match_finite_differences() {
    for term in [LossTerm::LdCvaeElbo, LossTerm::Alignment, LossTerm::LdCvae] {
        for seed in 0..3 {
            let (err, detail) = gradient_case_report(term, 100 + seed).unwrap();
            assert!(err < 1e-4, "{} seed {seed}: {err} {detail:?}", term.name());
        }
    }
}

#[test]
fn reconstruction_memorizes_a_single_patient() {
    let config = ModelConfig {
        d_model: 16,
        heads: 2,
        layers: 1,
        latent: 4,
        path_dim: 6,
        genomic_dim: 8,
        genomic_schema: vec![5; 6],
        ffn_hidden: 32,
        pool_hidden: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = LdCvaeModel::new(config.clone(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = random_patient(&mut rng, &config, 8);
    let view = PatientView {
        bag: &p.bag,
        genomics: p.genomics.as_deref(),
    };
    let mut opt = AdamW::new(&model.store, (0.9, 0.999), 1e-8);
    let mut noise = NoiseSource::new(9);
    let mut recon = Vec::new();
    for _ in 0..500 {
        let mut s = Session::new(&model.store, true);
        let (vars, report) = model.loss_vars(&mut s, view, &p.label, 0.0, 0.0, &mut noise).unwrap();
        let elbo = vars.ld_elbo.unwrap();
        s.g.backward(elbo).unwrap();
        let mut grads = model.store.zeros_like();
        s.accumulate_grads(&mut grads);
        opt.step(&mut model.store, &grads, 3e-3, 0.0);
        recon.push(report.ld.unwrap().recon.iter().sum::<f64>());
    }
    let first = recon[0];
    let last = recon[recon.len() - 1];
    assert!(last < 0.01 * first, "reconstruction {first} -> {last}");
}
