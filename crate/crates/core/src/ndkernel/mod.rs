//! Dense `f64` arrays, the primitive ops the separator needs, and
//! reverse-mode gradients for all of them.
//!
//! Layout convention: sequences are time-major, a feature map over `T`
//! frames with `F` features is a `[T × F]` array.

pub mod arena;
mod array;
mod graph;
mod ops;

pub use array::NdArray;
pub use graph::{Eval, Gradients, Graph, Param, Tape, Var};
pub use ops::{conv_out_len, conv_transpose_len, Neighbors, Op, OP_NAMES};

use crate::error::Result;

/// LayerNorm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

fn eval(op: Op, inputs: &[&NdArray]) -> Result<NdArray> {
    op.forward(inputs)
}

pub fn matmul(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    eval(Op::MatMul { ta: false, tb: false, alpha: 1.0 }, &[a, b])
}

pub fn softmax_rows(x: &NdArray) -> NdArray {
    ops::softmax_rows(x)
}

pub fn layer_norm(x: &NdArray, gain: &NdArray, bias: &NdArray, eps: f64) -> Result<NdArray> {
    eval(Op::LayerNorm { eps }, &[x, gain, bias])
}

/// Valid strided convolution of a mono signal `[T]` with filters
/// `[F × 1 × Kw]`, giving `[T' × F]` with `T' = (T − Kw) / stride + 1`.
pub fn conv1d(x: &NdArray, filters: &NdArray, stride: usize) -> Result<NdArray> {
    eval(Op::Conv1d { stride }, &[x, filters])
}

/// Adjoint of [`conv1d`]: `[T' × F]` back to a signal of length
/// `(T' − 1)·stride + Kw`.
pub fn conv1d_transpose(x: &NdArray, filters: &NdArray, stride: usize) -> Result<NdArray> {
    eval(Op::Conv1dTranspose { stride }, &[x, filters])
}

pub fn relu(x: &NdArray) -> NdArray {
    x.map(|v| v.max(0.0))
}

pub fn prelu(x: &NdArray, slope: &NdArray) -> Result<NdArray> {
    eval(Op::Prelu, &[x, slope])
}

pub fn add(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    eval(Op::Add, &[a, b])
}

pub fn mul(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    eval(Op::Mul, &[a, b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = NdArray::matrix(3, 3, (0..9).map(|v| v as f64 * 0.5 - 1.0).collect()).unwrap();
        assert_eq!(matmul(&NdArray::identity(3), &b).unwrap(), b);
        let a = NdArray::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let c = NdArray::from_rows(&[&[0.0], &[1.0]]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = NdArray::zeros(&[2, 3]);
        let b = NdArray::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let x = NdArray::from_rows(&[&[2.0, 2.0, 2.0]]).unwrap();
        for v in softmax_rows(&x).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = NdArray::from_rows(&[&[0.0, 3f64.ln()]]).unwrap();
        let y = softmax_rows(&x);
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
        let y = softmax_rows(&NdArray::from_rows(&[&[1000.0, 0.0]]).unwrap());
        assert!(y.is_finite());
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] < 1e-300);
    }

    #[test]
    fn layer_norm_cases() {
        let g = NdArray::full(&[4], 1.0);
        let b = NdArray::zeros(&[4]);
        let y = layer_norm(&NdArray::full(&[1, 4], 3.5), &g, &b, LN_EPS).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
        let g = NdArray::full(&[2], 1.0);
        let b = NdArray::zeros(&[2]);
        let y = layer_norm(&NdArray::vector(vec![1.0, 3.0]).reshape(&[1, 2]).unwrap(), &g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn conv_lengths() {
        let x = NdArray::zeros(&[8000]);
        let w = NdArray::full(&[4, 1, 16], 0.1);
        let h = conv1d(&x, &w, 8).unwrap();
        assert_eq!(h.shape(), &[999, 4]);
        assert!(h.data().iter().all(|v| *v == 0.0));
        let back = conv1d_transpose(&h, &w, 8).unwrap();
        assert_eq!(back.shape(), &[8000]);
        assert!(back.data().iter().all(|v| *v == 0.0));
        let err = conv1d(&NdArray::zeros(&[10]), &w, 8).unwrap_err();
        assert!(matches!(err, Error::InputTooShort { len: 10, kernel: 16 }));
    }

    #[test]
    fn impulse_filter_is_identity() {
        let x = NdArray::vector((0..32).map(|v| (v as f64 * 0.37).sin()).collect());
        let mut w = NdArray::zeros(&[1, 1, 5]);
        w.data_mut()[0] = 1.0;
        let y = conv1d(&x, &w, 1).unwrap();
        assert_eq!(y.shape(), &[28, 1]);
        assert_eq!(y.data(), &x.data()[..28]);
    }

    #[test]
    fn activations() {
        let x = NdArray::vector(vec![-1.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let x = NdArray::matrix(1, 1, vec![-4.0]).unwrap();
        let y = prelu(&x, &NdArray::vector(vec![0.25])).unwrap();
        assert_eq!(y.data(), &[-1.0]);
    }
}
