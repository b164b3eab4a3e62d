//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is rebuilt for every evaluation. Operations append nodes in
//! construction order and [`Graph::backward`] walks them in reverse. There is
//! no implicit broadcasting: shapes must agree exactly unless expanded with
//! [`Graph::broadcast`].

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{compare_with_central_differences, finite_difference_check};
pub use graph::{sigmoid, Graph, Op, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("data of length {len} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0, 0.0]));
        let s = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a = Tensor::new(vec![3, 3], (0..9).map(|v| v as f64 * 0.7 - 2.0).collect()).unwrap();
        let i = g.constant(Tensor::eye(3));
        let av = g.constant(a.clone());
        let p = g.matmul(i, av).unwrap();
        assert_eq!(g.value(p), &a);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0, 3.0]), true);
        let sq = g.square(x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero_is_quarter() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(0.0), true);
        let s = g.sigmoid(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().item(), 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]), true);
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(DiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(DiffError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, c), Err(DiffError::ShapeMismatch { op: "add", .. })));
        let v = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.broadcast(v, &[2, 3]).is_err());
    }

    #[test]
    fn log_and_sqrt_domain_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(DiffError::Domain { op: "log", .. })));
        assert!(matches!(g.sqrt(x), Err(DiffError::Domain { op: "sqrt", .. })));
        let y = g.constant(Tensor::vector(&[1.0, -2.0]));
        assert!(g.log(y).is_err());
    }

    #[test]
    fn fd_check_of_linear_sum_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.4, 0.25, -0.7, 0.9]).unwrap();
        let err = finite_difference_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn clamp_blocks_gradient_outside_interval() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[-20.0, 0.5, 20.0]), true);
        let c = g.clamp(x, -10.0, 10.0);
        assert_eq!(g.value(c).data(), &[-10.0, 0.5, 10.0]);
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_visits_nodes_in_reverse_order() {
        // inputs always precede their consumers
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]), true);
        let y = g.exp(x);
        let z = g.mul(y, x).unwrap();
        let s = g.sum(z);
        for v in [y, z, s] {
            assert!(g.inputs(v).iter().all(|&i| i < v.id()));
        }
    }
}
