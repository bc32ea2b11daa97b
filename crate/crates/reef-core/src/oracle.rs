//! Full-precision reference implementations of every device operation.
//!
//! These are the ground truth the quantized pipeline is measured against, so
//! they are written as plainly as possible and are kept independent of the
//! lowering and device code paths.

use crate::device::{ActivationKind, PairwiseKind, ReduceKind};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorShape};
use crate::Scalar;

/// Descriptor for [`oracle_execute`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleOp {
    /// `inputs[0] (MxN) * inputs[1] (NxK)`.
    Gemm,
    /// `inputs[0]` is the image, `inputs[1]` the kernel.
    Conv2d {
        stride: (usize, usize),
    },
    /// `inputs[0] (1xN) * inputs[1] (NxK)`.
    FullyConnected,
    Pairwise(PairwiseKind),
    Reduce(ReduceKind),
    Activation(ActivationKind),
    Crop {
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    },
    Ext {
        rows: usize,
        cols: usize,
    },
}

pub fn oracle_execute<T: Scalar>(op: OracleOp, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let need = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(Error::invalid_input(format!(
                "operation expects {n} inputs, got {}",
                inputs.len()
            )));
        }
        Ok(())
    };
    match op {
        OracleOp::Gemm => {
            need(2)?;
            gemm(inputs[0], inputs[1])
        }
        OracleOp::Conv2d { stride } => {
            need(2)?;
            conv2d(inputs[0], inputs[1], stride)
        }
        OracleOp::FullyConnected => {
            need(2)?;
            if inputs[0].rows() != 1 {
                return Err(Error::invalid_shape("fully_connected input must be 1xN"));
            }
            gemm(inputs[0], inputs[1])
        }
        OracleOp::Pairwise(kind) => {
            need(2)?;
            pairwise(kind, inputs[0], inputs[1])
        }
        OracleOp::Reduce(kind) => {
            need(1)?;
            let v = reduce(kind, inputs[0]);
            Tensor::new(TensorShape::new(1, 1)?, vec![v])
        }
        OracleOp::Activation(kind) => {
            need(1)?;
            Ok(activation(kind, inputs[0]))
        }
        OracleOp::Crop {
            row0,
            col0,
            rows,
            cols,
        } => {
            need(1)?;
            crop(inputs[0], row0, col0, rows, cols)
        }
        OracleOp::Ext { rows, cols } => {
            need(1)?;
            ext(inputs[0], rows, cols)
        }
    }
}

/// `C[i][k] = sum_j A[i][j] * B[j][k]`.
pub fn gemm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols() != b.rows() {
        return Err(Error::invalid_shape(format!(
            "gemm inner dimensions disagree: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, n, k) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); m * k];
    // i-j-k order streams both B and C rows.
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * k..(i + 1) * k];
        for j in 0..n {
            let aij = arow[j];
            let brow = b.row(j);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aij * bv;
            }
        }
    }
    Tensor::new(TensorShape::new(m, k)?, out)
}

/// Top-left-anchored cross-correlation with zero padding for out-of-range
/// reads. Output element `(i, j)` is the kernel window anchored at
/// `(i*sx, j*sy)`; the output shape is `(ceil(M/sx), ceil(N/sy))`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    (sx, sy): (usize, usize),
) -> Result<Tensor<T>> {
    if sx == 0 || sy == 0 {
        return Err(Error::invalid_input("stride components must be >= 1"));
    }
    if kernel.rows() > input.rows() || kernel.cols() > input.cols() {
        return Err(Error::invalid_shape(format!(
            "kernel {} larger than input {}",
            kernel.shape(),
            input.shape()
        )));
    }
    let out_rows = input.rows().div_ceil(sx);
    let out_cols = input.cols().div_ceil(sy);
    let mut out = Tensor::zeros(out_rows, out_cols)?;
    for i in 0..out_rows {
        for j in 0..out_cols {
            let mut acc = T::zero();
            for p in 0..kernel.rows() {
                let r = i * sx + p;
                if r >= input.rows() {
                    break;
                }
                for q in 0..kernel.cols() {
                    let c = j * sy + q;
                    if c >= input.cols() {
                        break;
                    }
                    acc += input.get(r, c) * kernel.get(p, q);
                }
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Helper for the kernel convention that rotates the kernel 180 degrees
/// before correlating; `conv2d(input, flip(kernel))` then matches that
/// convention.
pub fn flip_kernel<T: Scalar>(kernel: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (kernel.rows(), kernel.cols());
    let mut out = Tensor::zeros(r, c).expect("valid shape");
    for i in 0..r {
        for j in 0..c {
            out.set(i, j, kernel.get(r - 1 - i, c - 1 - j));
        }
    }
    out
}

pub fn pairwise<T: Scalar>(kind: PairwiseKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::invalid_shape(format!(
            "pairwise over mismatched shapes {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match kind {
            PairwiseKind::Add => x + y,
            PairwiseKind::Sub => x - y,
            PairwiseKind::Mul => x * y,
        })
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn reduce<T: Scalar>(kind: ReduceKind, a: &Tensor<T>) -> T {
    match kind {
        ReduceKind::Mean => {
            let sum = a.data().iter().fold(T::zero(), |s, &v| s + v);
            sum / T::from_usize(a.len()).unwrap()
        }
        ReduceKind::Max => a.data().iter().copied().fold(T::neg_infinity(), T::max),
    }
}

pub fn activation<T: Scalar>(kind: ActivationKind, a: &Tensor<T>) -> Tensor<T> {
    a.map(|v| match kind {
        ActivationKind::Tanh => v.tanh(),
        ActivationKind::Relu => v.max(T::zero()),
    })
}

pub fn crop<T: Scalar>(
    a: &Tensor<T>,
    row0: usize,
    col0: usize,
    rows: usize,
    cols: usize,
) -> Result<Tensor<T>> {
    if row0 + rows > a.rows() || col0 + cols > a.cols() {
        return Err(Error::invalid_shape(format!(
            "crop window {rows}x{cols}@({row0},{col0}) outside {}",
            a.shape()
        )));
    }
    a.window(row0, col0, rows, cols)
}

/// Zero-pad `a` up to `rows x cols`.
pub fn ext<T: Scalar>(a: &Tensor<T>, rows: usize, cols: usize) -> Result<Tensor<T>> {
    if rows < a.rows() || cols < a.cols() {
        return Err(Error::invalid_shape(format!(
            "ext target {rows}x{cols} smaller than source {}",
            a.shape()
        )));
    }
    a.window(0, 0, rows, cols)
}
