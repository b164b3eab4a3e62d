//! Gradient correctness for every primitive, checked against central
//! differences on random shapes and values.

use ldcvae::diff::{finite_difference_check, DiffError, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 20;
const TOL: f64 = 1e-5;
const STEP: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..5), rng.random_range(1..5)]
}

/// Contract the op's output against fixed random weights so every output
/// coordinate contributes to the scalar loss.
fn weighted_sum(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var, DiffError> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check_unary<F>(name: &str, seed: u64, input: impl Fn(&mut ChaCha8Rng, &[usize]) -> Tensor, op: F)
where
    F: Fn(&mut Graph, Var) -> Result<Var, DiffError> + Copy,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..TRIALS {
        let shape = random_shape(&mut rng);
        let x = input(&mut rng, &shape);
        let mut probe = Graph::new();
        let xv = probe.constant(x.clone());
        let yv = op(&mut probe, xv).unwrap();
        let out_shape = probe.shape(yv).to_vec();
        let w = away_from_zero(&mut rng, &out_shape);
        let err = finite_difference_check(
            |g, x| {
                let y = op(g, x)?;
                weighted_sum(g, y, &w)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "{name} trial {trial}: shape {shape:?} rel err {err:e}");
    }
}

fn check_binary<F>(name: &str, seed: u64, second: impl Fn(&mut ChaCha8Rng, &[usize]) -> Tensor, op: F)
where
    F: Fn(&mut Graph, Var, Var) -> Result<Var, DiffError> + Copy,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..TRIALS {
        let shape = random_shape(&mut rng);
        let a = away_from_zero(&mut rng, &shape);
        let b = second(&mut rng, &shape);
        let w = away_from_zero(&mut rng, &shape);
        // w.r.t. the first operand
        let err_a = finite_difference_check(
            |g, x| {
                let bv = g.constant(b.clone());
                let y = op(g, x, bv)?;
                weighted_sum(g, y, &w)
            },
            &a,
            STEP,
        )
        .unwrap();
        // and the second
        let err_b = finite_difference_check(
            |g, x| {
                let av = g.constant(a.clone());
                let y = op(g, av, x)?;
                weighted_sum(g, y, &w)
            },
            &b,
            STEP,
        )
        .unwrap();
        assert!(err_a < TOL && err_b < TOL, "{name} trial {trial}: {err_a:e} / {err_b:e}");
    }
}

#[test]
fn elementwise_binary_ops() {
    check_binary("add", 1, away_from_zero, |g, a, b| g.add(a, b));
    check_binary("sub", 2, away_from_zero, |g, a, b| g.sub(a, b));
    check_binary("mul", 3, away_from_zero, |g, a, b| g.mul(a, b));
    check_binary("div", 4, away_from_zero, |g, a, b| g.div(a, b));
}

#[test]
fn elementwise_unary_ops() {
    let smooth = |r: &mut ChaCha8Rng, s: &[usize]| random_tensor(r, s, -2.0, 2.0);
    let positive = |r: &mut ChaCha8Rng, s: &[usize]| random_tensor(r, s, 0.3, 3.0);
    check_unary("exp", 10, smooth, |g, x| Ok(g.exp(x)));
    check_unary("log", 11, positive, |g, x| g.log(x));
    check_unary("sqrt", 12, positive, |g, x| g.sqrt(x));
    check_unary("square", 13, smooth, |g, x| Ok(g.square(x)));
    check_unary("sigmoid", 14, smooth, |g, x| Ok(g.sigmoid(x)));
    check_unary("tanh", 15, smooth, |g, x| Ok(g.tanh(x)));
    check_unary("relu", 16, away_from_zero, |g, x| Ok(g.relu(x)));
    check_unary("elu", 17, away_from_zero, |g, x| Ok(g.elu(x)));
    check_unary("neg", 18, smooth, |g, x| Ok(g.neg(x)));
    check_unary("scale", 19, smooth, |g, x| Ok(g.scale(x, -1.7)));
    check_unary("clamp", 20, away_from_zero, |g, x| Ok(g.clamp(x, -1.0, 1.0)));
}

#[test]
fn fused_softmax_and_layernorm() {
    let wide = |r: &mut ChaCha8Rng, s: &[usize]| random_tensor(r, s, -3.0, 3.0);
    check_unary("softmax_lastdim", 30, wide, |g, x| g.softmax_lastdim(x));
    let at_least_three = |r: &mut ChaCha8Rng, s: &[usize]| {
        let shape = [s[0], s[1] + 2];
        random_tensor(r, &shape, -3.0, 3.0)
    };
    check_unary("layernorm_lastdim", 31, at_least_three, |g, x| g.layernorm_lastdim(x));
}

#[test]
fn reductions_and_layout_ops() {
    let smooth = |r: &mut ChaCha8Rng, s: &[usize]| random_tensor(r, s, -2.0, 2.0);
    check_unary("sum", 40, smooth, |g, x| {
        let s = g.sum(x);
        Ok(g.square(s))
    });
    check_unary("mean", 41, smooth, |g, x| {
        let m = g.mean(x);
        Ok(g.exp(m))
    });
    check_unary("transpose", 42, smooth, |g, x| g.transpose(x));
    check_unary("reshape", 43, smooth, |g, x| {
        let n = g.value(x).len();
        g.reshape(x, &[n])
    });
    check_unary("slice rows", 44, smooth, |g, x| {
        let r = g.shape(x)[0];
        g.slice(x, 0, r / 2, r)
    });
    check_unary("slice cols", 45, smooth, |g, x| {
        let c = g.shape(x)[1];
        g.slice(x, 1, 0, c.div_ceil(2))
    });
    check_unary("concat rows", 46, smooth, |g, x| {
        let e = g.exp(x);
        g.concat(&[x, e, x], 0)
    });
    check_unary("concat cols", 47, smooth, |g, x| {
        let t = g.tanh(x);
        g.concat(&[t, x], 1)
    });
    check_unary("broadcast row", 48, smooth, |g, x| {
        let c = g.shape(x)[1];
        let first = g.slice(x, 0, 0, 1)?;
        g.broadcast(first, &[3, c])
    });
    check_unary("broadcast col", 49, smooth, |g, x| {
        let r = g.shape(x)[0];
        let first = g.slice(x, 1, 0, 1)?;
        g.broadcast(first, &[r, 4])
    });
    check_unary("broadcast scalar", 50, smooth, |g, x| {
        let s = g.sum(x);
        g.broadcast(s, &[2, 3])
    });
}

#[test]
fn matmul_both_operands() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for trial in 0..TRIALS {
        let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let a = random_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[k, n], -1.0, 1.0);
        let w = away_from_zero(&mut rng, &[m, n]);
        let ea = finite_difference_check(
            |g, x| {
                let bv = g.constant(b.clone());
                let p = g.matmul(x, bv)?;
                let t = g.tanh(p);
                weighted_sum(g, t, &w)
            },
            &a,
            STEP,
        )
        .unwrap();
        let eb = finite_difference_check(
            |g, x| {
                let av = g.constant(a.clone());
                let p = g.matmul(av, x)?;
                let t = g.tanh(p);
                weighted_sum(g, t, &w)
            },
            &b,
            STEP,
        )
        .unwrap();
        assert!(ea < TOL && eb < TOL, "matmul trial {trial}: {ea:e} / {eb:e}");
    }
}

/// A small attention-like composite on a random 4×4 input.
fn composite(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var, DiffError> {
    let wv = g.constant(w.clone());
    let q = g.matmul(x, wv)?;
    let xt = g.transpose(x)?;
    let scores = g.matmul(q, xt)?;
    let attn = g.softmax_lastdim(scores)?;
    let mixed = g.matmul(attn, x)?;
    let normed = g.layernorm_lastdim(mixed)?;
    let s = g.sigmoid(normed);
    let sq = g.square(s);
    Ok(g.mean(sq))
}

#[test]
fn composite_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for _ in 0..TRIALS {
        let x = random_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let err = finite_difference_check(|g, x| composite(g, x, &w), &x, STEP).unwrap();
        assert!(err < TOL, "composite rel err {err:e}");
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let x = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[4, 4], -1.0, 1.0);
    let (a, b) = (0.7, -2.3);

    let grad_of = |build: &dyn Fn(&mut Graph, Var) -> Var| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let l = build(&mut g, xv);
        g.backward(l).unwrap();
        g.grad(xv).unwrap().data().to_vec()
    };
    let f = |g: &mut Graph, xv: Var| {
        let wv = g.constant(w.clone());
        let p = g.matmul(xv, wv).unwrap();
        let t = g.tanh(p);
        g.sum(t)
    };
    let h = |g: &mut Graph, xv: Var| {
        let e = g.exp(xv);
        let s = g.softmax_lastdim(e).unwrap();
        let q = g.square(s);
        g.sum(q)
    };
    let gf = grad_of(&f);
    let gh = grad_of(&h);
    let gc = grad_of(&|g: &mut Graph, xv: Var| {
        let fa = f(g, xv);
        let fb = h(g, xv);
        let sa = g.scale(fa, a);
        let sb = g.scale(fb, b);
        g.add(sa, sb).unwrap()
    });
    for i in 0..gc.len() {
        assert!((gc[i] - (a * gf[i] + b * gh[i])).abs() < 1e-10);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let x = random_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.leaf(x, true);
        let l = composite(&mut g, xv, &w).unwrap();
        g.backward(l).unwrap();
        (g.value(l).item().to_bits(), g.grad(xv).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn finite_values_after_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let x = random_tensor(&mut rng, &[4, 4], -30.0, 30.0);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let s = g.softmax_lastdim(xv).unwrap();
    let ln = g.layernorm_lastdim(xv).unwrap();
    let sg = g.sigmoid(xv);
    for v in [s, ln, sg] {
        assert!(g.value(v).is_finite());
    }
}
