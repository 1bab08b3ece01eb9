//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! The primitive set is deliberately small: affine maps, relu, softmax
//! cross-entropy and a few elementwise ops. Everything downstream (training,
//! Fisher diagonals, Hessian-vector products) differentiates through
//! [`Tape::backward`]. The finite-difference routines in [`oracle`] are the
//! independent reference used to check it.

pub mod oracle;
mod tape;
mod tensor;

pub use oracle::{finite_diff_gradient, hessian_vector_product};
pub use tape::{softmax_rows, Tape, Var, PROB_FLOOR};
pub(crate) use tape::softmax_row;
pub use tensor::Tensor;

/// Gradient aligned with a parameter ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for GradientVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_identity_permutation_and_sum() {
        let cases = [
            (mat(&[&[1.0, 2.0]]), mat(&[&[1.0, 0.0], &[0.0, 1.0]]), vec![0.0, 0.0], vec![1.0, 2.0]),
            (mat(&[&[1.0, 0.0]]), mat(&[&[0.0, 1.0], &[1.0, 0.0]]), vec![0.0, 0.0], vec![0.0, 1.0]),
            (mat(&[&[1.0, 1.0]]), mat(&[&[1.0, 1.0], &[1.0, 1.0]]), vec![1.0, 1.0], vec![3.0, 3.0]),
        ];
        for (x, w, b, expected) in cases {
            let mut tape = Tape::new();
            let (x, w, b) = (tape.constant(x), tape.param(w), tape.param(Tensor::vector(b)));
            let y = tape.affine(x, w, b).unwrap();
            assert_eq!(tape.value(y).shape(), &[1, 2]);
            assert_eq!(tape.value(y).data(), expected.as_slice());
        }
    }

    #[test]
    fn affine_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let w = tape.param(Tensor::zeros(vec![2, 2]));
        let b = tape.param(Tensor::zeros(vec![2]));
        let err = tape.affine(x, w, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "affine", .. }), "{err}");
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn relu_forward_and_dead_unit() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-3.0, -0.5, -1e-9]));
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::zeros(vec![1, 4]));
        let loss = tape.softmax_cross_entropy(l, &[2], None).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let l = tape.param(mat(&[&[50.0, 0.0, 0.0, 0.0]]));
        let loss = tape.softmax_cross_entropy(l, &[0], None).unwrap();
        assert!(tape.value(loss).item() < 1e-12);

        let mut tape = Tape::new();
        let l = tape.param(Tensor::zeros(vec![2, 2]));
        let loss = tape
            .softmax_cross_entropy(l, &[0, 1], Some(&[2.0, 0.0]))
            .unwrap();
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_ln_c_at_uniform_logits() {
        for classes in 2..=10 {
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::zeros(vec![3, classes]));
            let loss = tape.softmax_cross_entropy(l, &[0, classes - 1, 1], None).unwrap();
            assert!((tape.value(loss).item() - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::zeros(vec![1, 3]));
        let err = tape.softmax_cross_entropy(l, &[3], None).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, classes: 3, .. }));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::zeros(vec![1, 4]));
        let loss = tape.softmax_cross_entropy(l, &[0], None).unwrap();
        let g = tape.backward(loss).unwrap();
        let expected = [-0.75, 0.25, 0.25, 0.25];
        for (a, b) in g.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn square_backward() {
        let mut tape = Tape::new();
        let t = tape.param(Tensor::scalar(3.0));
        let sq = tape.square(t);
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.as_slice(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let t = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.square(t);
        assert!(matches!(tape.backward(sq), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn unused_params_get_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let _unused = tape.param(Tensor::vector(vec![5.0]));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 1.0, 0.0]);
    }
}
