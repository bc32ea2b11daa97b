//! Accuracy metrics used to compare a computed tensor against its float64
//! reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Denominator floor for MAPE: elements whose reference magnitude is below
/// this use the floor instead, so exact zeros do not blow the metric up.
pub const MAPE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Mean absolute percentage error, as a fraction.
    pub mape: f64,
    /// Root mean square error divided by the reference range (max - min),
    /// as a fraction. The normalizer choice is this crate's convention.
    pub rmse_normalized: f64,
    pub max_abs_error: f64,
    pub count: usize,
}

impl ErrorReport {
    pub fn compare<T: Scalar>(reference: &Tensor<T>, approx: &Tensor<T>) -> Result<ErrorReport> {
        Ok(ErrorReport {
            mape: mape(reference, approx, MAPE_EPSILON)?,
            rmse_normalized: rmse_normalized(reference, approx)?,
            max_abs_error: max_abs_error(reference, approx)?,
            count: reference.len(),
        })
    }
}

fn check_shapes<T: Scalar>(reference: &Tensor<T>, approx: &Tensor<T>) -> Result<()> {
    if reference.shape() != approx.shape() {
        return Err(Error::invalid_shape(format!(
            "metric over mismatched shapes {} vs {}",
            reference.shape(),
            approx.shape()
        )));
    }
    Ok(())
}

/// Mean over elements of |approx - ref| / max(|ref|, epsilon), as a fraction.
pub fn mape<T: Scalar>(reference: &Tensor<T>, approx: &Tensor<T>, epsilon: f64) -> Result<f64> {
    check_shapes(reference, approx)?;
    let mut acc = 0.0;
    for (r, a) in reference.data().iter().zip(approx.data()) {
        let r = r.to_f64().unwrap();
        let a = a.to_f64().unwrap();
        acc += (a - r).abs() / r.abs().max(epsilon);
    }
    Ok(acc / reference.len() as f64)
}

/// sqrt(mean((approx - ref)^2)) / (ref.max - ref.min). Zero for identical
/// tensors; an error if the reference range is zero while the tensors differ.
pub fn rmse_normalized<T: Scalar>(reference: &Tensor<T>, approx: &Tensor<T>) -> Result<f64> {
    check_shapes(reference, approx)?;
    let mut sq = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (r, a) in reference.data().iter().zip(approx.data()) {
        let r = r.to_f64().unwrap();
        let a = a.to_f64().unwrap();
        sq += (a - r) * (a - r);
        min = min.min(r);
        max = max.max(r);
    }
    if sq == 0.0 {
        return Ok(0.0);
    }
    let range = max - min;
    if range == 0.0 {
        return Err(Error::DegenerateRange(
            "rmse_normalized: constant reference with nonzero error".into(),
        ));
    }
    Ok((sq / reference.len() as f64).sqrt() / range)
}

pub fn max_abs_error<T: Scalar>(reference: &Tensor<T>, approx: &Tensor<T>) -> Result<f64> {
    check_shapes(reference, approx)?;
    Ok(reference
        .data()
        .iter()
        .zip(approx.data())
        .map(|(r, a)| (a.to_f64().unwrap() - r.to_f64().unwrap()).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::HostTensor;

    #[test]
    fn mape_identity_is_zero() {
        let t = HostTensor::random_uniform(4, 4, -5.0, 5.0, 1).unwrap();
        assert_eq!(mape(&t, &t, MAPE_EPSILON).unwrap(), 0.0);
    }

    #[test]
    fn mape_single_element() {
        let r = HostTensor::filled(1, 1, 100.0).unwrap();
        let a = HostTensor::filled(1, 1, 99.0).unwrap();
        let m = mape(&r, &a, 1e-12).unwrap();
        assert!((m - 0.01).abs() < 1e-15);
    }

    #[test]
    fn mape_matches_brute_force() {
        let r = HostTensor::random_uniform(8, 8, -10.0, 10.0, 2).unwrap();
        let a = HostTensor::random_uniform(8, 8, -10.0, 10.0, 3).unwrap();
        // Independent scalar loop.
        let mut expected = 0.0;
        for i in 0..64 {
            let rv = r.data()[i];
            let av = a.data()[i];
            expected += (av - rv).abs() / rv.abs().max(1e-9);
        }
        expected /= 64.0;
        assert!((mape(&r, &a, 1e-9).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn mape_shape_mismatch() {
        let r = HostTensor::zeros(2, 2).unwrap();
        let a = HostTensor::zeros(2, 3).unwrap();
        assert!(mape(&r, &a, 1e-9).is_err());
    }

    #[test]
    fn rmse_identity_is_zero() {
        let t = HostTensor::filled(3, 3, 2.0).unwrap();
        assert_eq!(rmse_normalized(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn rmse_hand_computed() {
        let r = HostTensor::from_rows(&[vec![0.0], vec![10.0]]).unwrap();
        let a = HostTensor::from_rows(&[vec![1.0], vec![9.0]]).unwrap();
        let v = rmse_normalized(&r, &a).unwrap();
        assert!((v - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rmse_matches_brute_force() {
        let r = HostTensor::random_uniform(16, 16, 0.0, 100.0, 4).unwrap();
        let a = HostTensor::random_uniform(16, 16, 0.0, 100.0, 5).unwrap();
        let mut sq = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..256 {
            sq += (a.data()[i] - r.data()[i]).powi(2);
            lo = lo.min(r.data()[i]);
            hi = hi.max(r.data()[i]);
        }
        let expected = (sq / 256.0).sqrt() / (hi - lo);
        assert!((rmse_normalized(&r, &a).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn rmse_degenerate_range_errors() {
        let r = HostTensor::filled(2, 2, 5.0).unwrap();
        let a = HostTensor::filled(2, 2, 6.0).unwrap();
        assert!(matches!(
            rmse_normalized(&r, &a),
            Err(crate::Error::DegenerateRange(_))
        ));
    }
}
