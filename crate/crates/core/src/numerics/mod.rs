//! Dense tensors, a reverse-mode differentiation tape and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("softmax row {row} has no unmasked entry")]
    EmptyNeighborhood { row: usize },
    #[error("variable is not recorded on this tape")]
    DetachedTensor,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let col = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let dot = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(dot).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn elementwise_definitions() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        approx(tape.value(y).data(), &[-0.2, 0.0, 2.0], 1e-15);

        let s = tape.constant(Tensor::scalar(-3.0));
        let r = tape.relu(s).unwrap();
        assert_eq!(tape.value(r).item(), 0.0);

        let z = tape.constant(Tensor::scalar(0.0));
        let sg = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(sg).item(), 0.5);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, b).is_err());
        let s = tape.constant(Tensor::scalar(2.0));
        let ok = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(ok).shape(), &[2]);
    }

    #[test]
    fn softmax_masked_examples() {
        let mut tape = Tape::new();
        let all: Rc<[bool]> = Rc::from(vec![true; 3]);
        let s = tape.constant(Tensor::vector(vec![5.0, 5.0, 5.0]));
        let y = tape.softmax_masked(s, all.clone()).unwrap();
        approx(tape.value(y).data(), &[1.0 / 3.0; 3], 1e-15);

        let s = tape.constant(Tensor::vector(vec![0.0, 100.0]));
        let y = tape.softmax_masked(s, Rc::from(vec![true, false])).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        let s = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.softmax_masked(s, all).unwrap();
        approx(tape.value(y).data(), &[0.09003, 0.24473, 0.66524], 1e-5);

        let s = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            tape.softmax_masked(s, Rc::from(vec![false, false])),
            Err(NumericsError::EmptyNeighborhood { row: 0 })
        );
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let loss = tape.mul(x, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);
    }

    #[test]
    fn backward_constant_loss_gives_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(4.0));
        let grads = tape.backward(c).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_foreign_loss() {
        let mut other = Tape::new();
        let loss = other.constant(Tensor::scalar(1.0));
        let tape = Tape::new();
        assert_eq!(
            tape.backward(loss).unwrap_err(),
            NumericsError::DetachedTensor
        );
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::NotScalar { .. })
        ));
    }

    #[test]
    fn shared_operand_accumulates() {
        // loss = sum(x * x + x) -> grad 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap().wrt(x);
        assert_eq!(g.data(), &[3.0, -3.0]);
    }
}
