//! Independent numerical oracles used by the test suites and by the `check`
//! command. None of these share code paths with the closed forms they verify.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Mean and variance of the normalized pointwise product of 1-d Gaussian
/// densities, evaluated on the grid `[lo, hi]` with spacing `step`.
pub fn grid_density_product(factors: &[(f64, f64)], lo: f64, hi: f64, step: f64) -> (f64, f64) {
    let n = ((hi - lo) / step).round() as usize + 1;
    let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
    let log_density: Vec<f64> = xs
        .iter()
        .map(|&x| {
            factors
                .iter()
                .map(|&(m, v)| -0.5 * (x - m) * (x - m) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln())
                .sum()
        })
        .collect();
    let peak = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_density.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = w.iter().sum();
    let mean = xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / total;
    let var = xs.iter().zip(&w).map(|(x, w)| (x - mean) * (x - mean) * w).sum::<f64>() / total;
    (mean, var)
}

/// Monte-Carlo estimate of `E_q[ln q − ln p]` for `p = N(0, I)`, with its
/// standard error.
pub fn monte_carlo_kl_to_standard(mean: &[f64], var: &[f64], draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let mut log_ratio = 0.0;
        for j in 0..mean.len() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let z = mean[j] + var[j].sqrt() * eps;
            // ln q(z) − ln p(z), normalizing constants of 2π cancel
            log_ratio += -0.5 * eps * eps - 0.5 * var[j].ln() + 0.5 * z * z;
        }
        sum += log_ratio;
        sum_sq += log_ratio * log_ratio;
    }
    let n = draws as f64;
    let est = sum / n;
    let sample_var = (sum_sq / n - est * est) * n / (n - 1.0);
    (est, (sample_var / n).sqrt())
}

fn grid_quantiles(mean: f64, var: f64, lo: f64, hi: f64, cells: usize, levels: &[f64]) -> Vec<f64> {
    let step = (hi - lo) / cells as f64;
    let xs: Vec<f64> = (0..=cells).map(|i| lo + i as f64 * step).collect();
    let pdf: Vec<f64> = xs
        .iter()
        .map(|x| (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt())
        .collect();
    let mut cdf = vec![0.0; xs.len()];
    for i in 1..xs.len() {
        cdf[i] = cdf[i - 1] + 0.5 * (pdf[i] + pdf[i - 1]) * step;
    }
    let total = *cdf.last().unwrap();
    cdf.iter_mut().for_each(|c| *c /= total);
    let mut out = Vec::with_capacity(levels.len());
    let mut k = 0;
    for &u in levels {
        while k + 1 < cdf.len() && cdf[k + 1] < u {
            k += 1;
        }
        let (c0, c1) = (cdf[k], cdf[(k + 1).min(cdf.len() - 1)]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        out.push(xs[k] + t * step);
    }
    out
}

/// Squared 2-Wasserstein distance between two 1-d Gaussians computed as the
/// optimal-transport cost `∫₀¹ (F_a⁻¹(u) − F_b⁻¹(u))² du` of their discretized
/// quantile functions.
pub fn grid_transport_w2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let sa = a.1.sqrt();
    let sb = b.1.sqrt();
    let lo = (a.0 - 12.0 * sa).min(b.0 - 12.0 * sb);
    let hi = (a.0 + 12.0 * sa).max(b.0 + 12.0 * sb);
    let levels_n = 20_000;
    let levels: Vec<f64> = (0..levels_n).map(|k| (k as f64 + 0.5) / levels_n as f64).collect();
    let qa = grid_quantiles(a.0, a.1, lo, hi, 200_000, &levels);
    let qb = grid_quantiles(b.0, b.1, lo, hi, 200_000, &levels);
    qa.iter().zip(&qb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / levels_n as f64
}

/// Harrell's C by explicit enumeration of every ordered pair. `events[i]`
/// is true when patient `i` experienced the event (was not censored).
/// Returns `None` when no pair is comparable.
pub fn brute_force_c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    let mut comparable = 0u64;
    let mut score_twice = 0u64;
    for i in 0..risks.len() {
        for j in 0..risks.len() {
            if i == j || !events[i] || !(times[i] < times[j]) {
                continue;
            }
            comparable += 1;
            if risks[i] > risks[j] {
                score_twice += 2;
            } else if risks[i] == risks[j] {
                score_twice += 1;
            }
        }
    }
    (comparable > 0).then(|| score_twice as f64 / (2 * comparable) as f64)
}
