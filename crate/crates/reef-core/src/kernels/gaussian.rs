//! Gaussian elimination without pivoting: one pairwise multiply per row
//! reduction, back substitution on the host.

use crate::error::{Error, Result};
use crate::lower::{OpKind, QuantFlags};
use crate::runtime::Runtime;
use crate::tensor::TensorShape;
use crate::HostTensor;

const PIVOT_TOL: f64 = 1e-12;

fn check_system(a: &HostTensor, b: &HostTensor) -> Result<usize> {
    if a.rows() != a.cols() {
        return Err(Error::invalid_shape(format!(
            "coefficient matrix must be square, got {}",
            a.shape()
        )));
    }
    if b.rows() != a.rows() || b.cols() != 1 {
        return Err(Error::invalid_shape(format!(
            "rhs must be {}x1, got {}",
            a.rows(),
            b.shape()
        )));
    }
    Ok(a.rows())
}

fn back_substitute(w: &HostTensor) -> Result<HostTensor> {
    let n = w.rows();
    let mut x = HostTensor::zeros(n, 1)?;
    for i in (0..n).rev() {
        let mut acc = w.get(i, n);
        for j in i + 1..n {
            acc -= w.get(i, j) * x.get(j, 0);
        }
        let pivot = w.get(i, i);
        if pivot.abs() < PIVOT_TOL {
            return Err(Error::SingularMatrix(i));
        }
        x.set(i, 0, acc / pivot);
    }
    Ok(x)
}

/// Solve `A x = b` by forward elimination on the device and host back
/// substitution.
///
/// Each elimination step builds the multiplier matrix (one constant per
/// row) and the repeated pivot row on the host, forms their element-wise
/// product with a single `mul`, and subtracts it from the trailing rows.
pub fn gaussian(
    rt: &Runtime,
    a: &HostTensor,
    b: &HostTensor,
    flags: &QuantFlags,
) -> Result<HostTensor> {
    let n = check_system(a, b)?;
    // Augmented working matrix [A | b].
    let mut w = HostTensor::zeros(n, n + 1)?;
    for i in 0..n {
        for j in 0..n {
            w.set(i, j, a.get(i, j));
        }
        w.set(i, n, b.get(i, 0));
    }
    for k in 0..n - 1 {
        let pivot = w.get(k, k);
        if pivot.abs() < PIVOT_TOL {
            return Err(Error::SingularMatrix(k));
        }
        let rows = n - k - 1;
        let cols = n + 1 - k;
        let mut mults = HostTensor::zeros(rows, cols)?;
        let mut pivot_rows = HostTensor::zeros(rows, cols)?;
        for i in 0..rows {
            let m = w.get(k + 1 + i, k) / pivot;
            for j in 0..cols {
                mults.set(i, j, m);
                pivot_rows.set(i, j, w.get(k, k + j));
            }
        }
        let bm = super::upload(rt, &mults)?;
        let bp = super::upload(rt, &pivot_rows)?;
        let product = super::run_op(
            rt,
            OpKind::Mul,
            flags,
            &[bm, bp],
            TensorShape::new(rows, cols)?,
        )?;
        for i in 0..rows {
            for j in 0..cols {
                let cur = w.get(k + 1 + i, k + j);
                w.set(k + 1 + i, k + j, cur - product.get(i, j));
            }
        }
    }
    back_substitute(&w)
}

/// Float64 elimination with the same update order.
pub fn gaussian_reference(a: &HostTensor, b: &HostTensor) -> Result<HostTensor> {
    let n = check_system(a, b)?;
    let mut w = HostTensor::zeros(n, n + 1)?;
    for i in 0..n {
        for j in 0..n {
            w.set(i, j, a.get(i, j));
        }
        w.set(i, n, b.get(i, 0));
    }
    for k in 0..n - 1 {
        let pivot = w.get(k, k);
        if pivot.abs() < PIVOT_TOL {
            return Err(Error::SingularMatrix(k));
        }
        for i in k + 1..n {
            let m = w.get(i, k) / pivot;
            for j in k..n + 1 {
                let cur = w.get(i, j);
                w.set(i, j, cur - m * w.get(k, j));
            }
        }
    }
    back_substitute(&w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::inputs::exact_linear_system;
    use crate::metrics::mape;
    use crate::oracle;

    fn exact_flags() -> QuantFlags {
        QuantFlags::with_all_ranges(-128.0, 127.0)
    }

    #[test]
    fn identity_system() {
        let rt = Runtime::with_defaults();
        let mut a = HostTensor::zeros(3, 3).unwrap();
        for i in 0..3 {
            a.set(i, i, 1.0);
        }
        let b = HostTensor::from_rows(&[vec![5.0], vec![-2.0], vec![7.0]]).unwrap();
        let x = gaussian(&rt, &a, &b, &exact_flags()).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn diagonal_system_by_hand() {
        let rt = Runtime::with_defaults();
        let a = HostTensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let b = HostTensor::from_rows(&[vec![2.0], vec![8.0]]).unwrap();
        let x = gaussian(&rt, &a, &b, &exact_flags()).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0]);
    }

    #[test]
    fn singular_pivot_detected() {
        let rt = Runtime::with_defaults();
        let a = HostTensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let b = HostTensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            gaussian(&rt, &a, &b, &exact_flags()),
            Err(Error::SingularMatrix(0))
        ));
    }

    #[test]
    fn diagonally_dominant_float_system_tracks_reference() {
        let rt = Runtime::with_defaults();
        let n = 8;
        let mut a = HostTensor::random_uniform(n, n, -1.0, 1.0, 51).unwrap();
        for i in 0..n {
            a.set(i, i, 10.0 + a.get(i, i));
        }
        let b = HostTensor::random_uniform(n, 1, -5.0, 5.0, 52).unwrap();
        let got = gaussian(&rt, &a, &b, &QuantFlags::default()).unwrap();
        let want = gaussian_reference(&a, &b).unwrap();
        assert!(mape(&want, &got, 1e-9).unwrap() < 0.05);
    }

    #[test]
    fn integer_system_is_exact_on_device() {
        let rt = Runtime::with_defaults();
        let (a, b) = exact_linear_system(48, 9);
        let got = gaussian(&rt, &a, &b, &exact_flags()).unwrap();
        let want = gaussian_reference(&a, &b).unwrap();
        assert_eq!(got, want);
        // Solution actually solves the system.
        let residual = oracle::gemm(&a, &got).unwrap();
        for (r, t) in residual.data().iter().zip(b.data()) {
            assert!((r - t).abs() < 1e-9);
        }
        assert_eq!(rt.saturation_events(), 0);
    }

    #[test]
    fn device_trace_is_mul_only() {
        use crate::device::InstructionKind;
        let rt = Runtime::with_defaults();
        let (a, b) = exact_linear_system(16, 10);
        gaussian(&rt, &a, &b, &exact_flags()).unwrap();
        for stats in rt.device_stats() {
            for kind in stats.exec_counts.keys() {
                assert_eq!(*kind, InstructionKind::Mul);
            }
        }
    }
}
