use ldcvae::diff::{finite_difference_check, Graph, Tensor};
use ldcvae::gaussian::*;
use ldcvae::oracle::{grid_density_product, grid_transport_w2, monte_carlo_kl_to_standard};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn n1(mean: f64, var: f64) -> DiagGaussian {
    DiagGaussian::new(vec![mean], vec![var]).unwrap()
}

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> DiagGaussian {
    DiagGaussian::new(
        (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        (0..d).map(|_| rng.random_range(0.1..3.0)).collect(),
    )
    .unwrap()
}

#[test]
fn poe_matches_grid_product_examples() {
    let prior = n1(0.0, 1.0);
    let cases = [
        (vec![n1(0.0, 1.0), n1(0.0, 1.0)], (0.0, 1.0 / 3.0)),
        (vec![n1(1.0, 1.0)], (0.5, 0.5)),
    ];
    for (experts, expected) in cases {
        let got = poe_combine(&experts, &prior).unwrap();
        let mut factors: Vec<(f64, f64)> = experts.iter().map(|e| (e.mean()[0], e.var()[0])).collect();
        factors.push((0.0, 1.0));
        let (gm, gv) = grid_density_product(&factors, -10.0, 10.0, 1e-3);
        assert!((got.mean()[0] - gm).abs() < 1e-4 && (got.var()[0] - gv).abs() < 1e-4);
        assert!((got.mean()[0] - expected.0).abs() < 1e-12);
        assert!((got.var()[0] - expected.1).abs() < 1e-12);
    }
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..3 {
        let q = random_gaussian(&mut rng, 3);
        let (est, se) = monte_carlo_kl_to_standard(q.mean(), q.var(), 1_000_000, 100 + trial);
        let closed = kl_to_standard(&q);
        assert!((est - closed).abs() < 3.0 * se, "closed {closed} mc {est} ± {se}");
    }
}

#[test]
fn kl_between_cross_checked_by_monte_carlo() {
    // KL(N(0,1) ‖ N(0,4)) = E_q[ln q − ln p]
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 1_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        let lr = -0.5 * z * z + 0.5 * z * z / 4.0 + 0.5 * 4f64.ln();
        s += lr;
        s2 += lr * lr;
    }
    let n = draws as f64;
    let est = s / n;
    let se = ((s2 / n - est * est) / n).sqrt();
    let closed = kl_between(&n1(0.0, 1.0), &n1(0.0, 4.0)).unwrap();
    assert!((est - closed).abs() < 3.0 * se);
}

#[test]
fn exact_w2_matches_grid_transport() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let a = random_gaussian(&mut rng, 1);
        let b = random_gaussian(&mut rng, 1);
        let oracle = grid_transport_w2((a.mean()[0], a.var()[0]), (b.mean()[0], b.var()[0]));
        let closed = wasserstein2_exact(&a, &b).unwrap();
        assert!((oracle - closed).abs() < 1e-2, "grid {oracle} closed {closed}");
    }
}

#[test]
fn reparameterized_sample_mean() {
    let q = n1(2.0, 1.0);
    let mut noise = NoiseSource::new(17);
    let n = 100_000;
    let mean = (0..n).map(|_| reparameterize(&q, &mut noise)[0]).sum::<f64>() / n as f64;
    assert!((mean - 2.0).abs() < 0.02, "{mean}");
}

#[test]
fn divergences_are_non_negative_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..1000 {
        let d = rng.random_range(1..6);
        let a = random_gaussian(&mut rng, d);
        let b = random_gaussian(&mut rng, d);
        assert!(kl_to_standard(&a) >= 0.0);
        assert!(kl_between(&a, &b).unwrap() > 0.0);
        assert!(wasserstein_align(&a, &b).unwrap() > 0.0);
        assert!(wasserstein2_exact(&a, &b).unwrap() > 0.0);
        assert!(kl_between(&a, &a).unwrap().abs() < 1e-12);
        assert_eq!(wasserstein_align(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn differentiable_losses_pass_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..20 {
        let d = 3;
        let mu_b = Tensor::row(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let lv_b = Tensor::row(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        // x packs (μ_a, log Σ_a) as a 2 × d matrix
        let x = Tensor::new(vec![2, d], (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for kind in [AlignKind::Variance, AlignKind::Exact] {
            let err = finite_difference_check(
                |g, x| {
                    let mu = g.slice(x, 0, 0, 1)?;
                    let lv = g.slice(x, 0, 1, 2)?;
                    let a = GaussianVars::from_log_var(g, mu, lv).map_err(into_diff)?;
                    let mb = g.constant(mu_b.clone());
                    let lb = g.constant(lv_b.clone());
                    let b = GaussianVars::from_log_var(g, mb, lb).map_err(into_diff)?;
                    let al = align_vars(g, &a, &b, kind).map_err(into_diff)?;
                    let joint = poe_standard_prior(g, &[a, b], d).map_err(into_diff)?;
                    let kl = kl_to_standard_vars(g, &joint).map_err(into_diff)?;
                    let klb = kl_between_vars(g, &a, &b).map_err(into_diff)?;
                    let s = g.add(al, kl)?;
                    g.add(s, klb)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind:?}: {err:e}");
        }
    }
}

fn into_diff(e: GaussianError) -> ldcvae::diff::DiffError {
    match e {
        GaussianError::Diff(d) => d,
        other => ldcvae::diff::DiffError::Invalid(other.to_string()),
    }
}

#[test]
fn reparameterized_sample_is_differentiable() {
    let mut noise = NoiseSource::new(4);
    let mut g = Graph::new();
    let mu = g.leaf(Tensor::row(&[0.5, -0.5]), true);
    let lv = g.leaf(Tensor::row(&[0.2, -0.3]), true);
    let q = GaussianVars::from_log_var(&mut g, mu, lv).unwrap();
    let z = reparameterize_vars(&mut g, &q, &mut noise).unwrap();
    let s = g.sum(z);
    g.backward(s).unwrap();
    assert_eq!(g.grad(mu).unwrap().data(), &[1.0, 1.0]);
    // d/dlv (exp(lv/2)·ε) = ½·exp(lv/2)·ε, nonzero for ε ≠ 0
    assert!(g.grad(lv).unwrap().data().iter().all(|v| v.abs() > 0.0));
}

proptest! {
    #[test]
    fn poe_precisions_add(
        means in prop::collection::vec(-3.0f64..3.0, 8),
        vars in prop::collection::vec(0.05f64..5.0, 8),
        k in 0usize..4,
    ) {
        let d = 2;
        let experts: Vec<DiagGaussian> = (0..k)
            .map(|i| DiagGaussian::new(means[2*i..2*i+d].to_vec(), vars[2*i..2*i+d].to_vec()).unwrap())
            .collect();
        let prior = DiagGaussian::standard(d);
        let joint = poe_combine(&experts, &prior).unwrap();
        for j in 0..d {
            let expected: f64 = 1.0 + experts.iter().map(|e| 1.0 / e.var()[j]).sum::<f64>();
            prop_assert!((joint.precision()[j] - expected).abs() < 1e-12 * expected.max(1.0));
        }
    }

    #[test]
    fn single_expert_product_sharpens(mean in -3.0f64..3.0, var in 0.01f64..10.0) {
        let joint = poe_combine(&[n1(mean, var)], &n1(0.0, 1.0)).unwrap();
        prop_assert!(joint.var()[0] < var.min(1.0));
    }

    #[test]
    fn alignment_invariant_under_joint_permutation(
        ma in prop::collection::vec(-2.0f64..2.0, 4),
        va in prop::collection::vec(0.1f64..3.0, 4),
        mb in prop::collection::vec(-2.0f64..2.0, 4),
        vb in prop::collection::vec(0.1f64..3.0, 4),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let a = DiagGaussian::new(ma.clone(), va.clone()).unwrap();
        let b = DiagGaussian::new(mb.clone(), vb.clone()).unwrap();
        let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let ap = DiagGaussian::new(pick(&ma), pick(&va)).unwrap();
        let bp = DiagGaussian::new(pick(&mb), pick(&vb)).unwrap();
        let base = wasserstein_align(&a, &b).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((base - wasserstein_align(&ap, &bp).unwrap()).abs() < 1e-12);
    }
}
