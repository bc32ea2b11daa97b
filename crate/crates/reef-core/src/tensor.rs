//! Row-major matrices and range statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Scalar, DEFAULT_SEED};

/// Tensors above this element count are range-scanned on a 1% sample by
/// default; smaller ones get a full scan.
pub const FULL_SCAN_LIMIT: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub rows: usize,
    pub cols: usize,
}

impl TensorShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid_input(format!(
                "tensor dimensions must be positive, got {rows}x{cols}"
            )));
        }
        Ok(TensorShape { rows, cols })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false // rows >= 1 and cols >= 1 by construction
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: TensorShape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: TensorShape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::invalid_shape(format!(
                "data length {} does not match shape {}",
                data.len(),
                shape
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("tensor contains non-finite values"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::invalid_input("empty row set"));
        }
        let shape = TensorShape::new(rows.len(), rows[0].len())?;
        let mut data = Vec::with_capacity(shape.len());
        for r in rows {
            if r.len() != shape.cols {
                return Err(Error::invalid_shape("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(shape, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        let shape = TensorShape::new(rows, cols)?;
        Ok(Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
        })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Result<Self> {
        let shape = TensorShape::new(rows, cols)?;
        Ok(Tensor {
            shape,
            data: vec![value; shape.len()],
        })
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.shape.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape.cols;
        &self.data[r * c..(r + 1) * c]
    }

    /// Copy of the `rows x cols` window anchored at `(r0, c0)`; reads outside
    /// the tensor yield zero.
    pub fn window(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Tensor<T>> {
        let mut out = Tensor::zeros(rows, cols)?;
        for r in 0..rows {
            let sr = r0 + r;
            if sr >= self.rows() {
                break;
            }
            for c in 0..cols {
                let sc = c0 + c;
                if sc >= self.cols() {
                    break;
                }
                out.set(r, c, self.get(sr, sc));
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(self.cols(), self.rows()).expect("valid shape");
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Deterministic uniform fill over `[lo, hi)`.
    pub fn random_uniform(rows: usize, cols: usize, lo: T, hi: T, seed: u64) -> Result<Self> {
        let shape = TensorShape::new(rows, cols)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo_f = lo.to_f64().ok_or_else(|| Error::invalid_input("bad lo"))?;
        let hi_f = hi.to_f64().ok_or_else(|| Error::invalid_input("bad hi"))?;
        let data = (0..shape.len())
            .map(|_| T::from_f64(rng.gen_range(lo_f..hi_f)).unwrap())
            .collect();
        Ok(Tensor { shape, data })
    }
}

/// Extrema of a tensor, possibly taken on a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeStats {
    pub min: f64,
    pub max: f64,
    /// True when min/max came from a sample rather than a whole-tensor scan.
    pub sampled: bool,
}

impl RangeStats {
    pub fn new(min: f64, max: f64, sampled: bool) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(Error::invalid_input(format!(
                "invalid range [{min}, {max}]"
            )));
        }
        Ok(RangeStats { min, max, sampled })
    }

    pub fn from_bounds(min: f64, max: f64) -> Result<Self> {
        RangeStats::new(min, max, false)
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }
}

/// Min/max of `t`, exact when `sample_fraction == 1`, otherwise over a
/// deterministic seeded sample (at least one element).
pub fn range_stats<T: Scalar>(t: &Tensor<T>, sample_fraction: f64) -> Result<RangeStats> {
    range_stats_seeded(t, sample_fraction, DEFAULT_SEED)
}

pub fn range_stats_seeded<T: Scalar>(
    t: &Tensor<T>,
    sample_fraction: f64,
    seed: u64,
) -> Result<RangeStats> {
    if t.is_empty() {
        return Err(Error::invalid_input("range_stats of empty tensor"));
    }
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(Error::invalid_input(format!(
            "sample_fraction must be in (0, 1], got {sample_fraction}"
        )));
    }
    let scan = |idx: &mut dyn Iterator<Item = usize>| -> (f64, f64) {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for i in idx {
            let v = t.data()[i].to_f64().unwrap();
            min = min.min(v);
            max = max.max(v);
        }
        (min, max)
    };
    if sample_fraction >= 1.0 {
        let (min, max) = scan(&mut (0..t.len()));
        return RangeStats::new(min, max, false);
    }
    let n = ((t.len() as f64 * sample_fraction).ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..t.len())).collect();
    idx.sort_unstable();
    idx.dedup();
    let (min, max) = scan(&mut idx.into_iter());
    RangeStats::new(min, max, true)
}

/// Policy helper: full scan up to [`FULL_SCAN_LIMIT`] elements, 1% sample
/// above it.
pub fn range_stats_auto<T: Scalar>(t: &Tensor<T>) -> Result<RangeStats> {
    if t.len() <= FULL_SCAN_LIMIT {
        range_stats(t, 1.0)
    } else {
        range_stats(t, 0.01)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::HostTensor;

    #[test]
    fn shape_rejects_zero_dims() {
        assert!(TensorShape::new(0, 5).is_err());
        assert!(TensorShape::new(5, 0).is_err());
    }

    #[test]
    fn data_length_must_match() {
        let s = TensorShape::new(2, 2).unwrap();
        assert!(HostTensor::new(s, vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let s = TensorShape::new(1, 2).unwrap();
        assert!(HostTensor::new(s, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn range_stats_full_scan() {
        let t = HostTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let rs = range_stats(&t, 1.0).unwrap();
        assert_eq!((rs.min, rs.max, rs.sampled), (1.0, 4.0, false));
    }

    #[test]
    fn range_stats_constant_tensor() {
        let t = HostTensor::filled(1, 7, 3.25).unwrap();
        let rs = range_stats(&t, 1.0).unwrap();
        assert_eq!((rs.min, rs.max), (3.25, 3.25));
    }

    #[test]
    fn range_stats_sample_within_full_scan() {
        let t = HostTensor::random_uniform(1, 1000, 0.0, 128.0, 7).unwrap();
        let full = range_stats(&t, 1.0).unwrap();
        let sampled = range_stats(&t, 0.1).unwrap();
        assert!(sampled.sampled);
        assert!(sampled.min >= full.min && sampled.max <= full.max);
        assert!(sampled.min >= 0.0 && sampled.max < 128.0);
        // Same seed, same answer.
        let again = range_stats(&t, 0.1).unwrap();
        assert_eq!(sampled, again);
    }

    #[test]
    fn range_stats_rejects_bad_fraction() {
        let t = HostTensor::filled(1, 1, 0.0).unwrap();
        assert!(range_stats(&t, 0.0).is_err());
        assert!(range_stats(&t, 1.5).is_err());
    }

    #[test]
    fn window_zero_pads() {
        let t = HostTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let w = t.window(1, 1, 2, 2).unwrap();
        assert_eq!(w.data(), &[4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn auto_policy_samples_only_above_the_limit() {
        let small = HostTensor::filled(1, FULL_SCAN_LIMIT, 1.0).unwrap();
        assert!(!range_stats_auto(&small).unwrap().sampled);
        let big = HostTensor::filled(1, FULL_SCAN_LIMIT + 1, 1.0).unwrap();
        assert!(range_stats_auto(&big).unwrap().sampled);
    }
}
