//! PageRank by the power method, one fully-connected matrix-vector product
//! per iteration.

use crate::error::{Error, Result};
use crate::lower::{OpKind, QuantFlags};
use crate::oracle;
use crate::runtime::Runtime;
use crate::tensor::TensorShape;
use crate::HostTensor;

pub const DAMPING: f64 = 0.85;

/// Column-normalize an adjacency matrix; dangling columns become uniform.
fn column_stochastic(a: &HostTensor) -> HostTensor {
    let n = a.rows();
    let mut m = HostTensor::zeros(n, n).expect("valid shape");
    for j in 0..n {
        let mut sum = 0.0;
        for i in 0..n {
            sum += a.get(i, j);
        }
        if sum > 0.0 {
            for i in 0..n {
                m.set(i, j, a.get(i, j) / sum);
            }
        } else {
            for i in 0..n {
                m.set(i, j, 1.0 / n as f64);
            }
        }
    }
    m
}

fn power_step(m: &HostTensor, x: &HostTensor) -> HostTensor {
    // y = damping * (M x) + (1 - damping)/n, then L1-renormalized.
    let n = x.cols();
    let mut y = HostTensor::zeros(1, n).expect("valid shape");
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += m.get(i, j) * x.get(0, j);
        }
        y.set(0, i, acc);
    }
    finish_step(&mut y);
    y
}

fn finish_step(y: &mut HostTensor) {
    let n = y.cols();
    let teleport = (1.0 - DAMPING) / n as f64;
    for v in y.data_mut() {
        *v = DAMPING * *v + teleport;
    }
    let sum: f64 = y.data().iter().sum();
    for v in y.data_mut() {
        *v /= sum;
    }
}

fn uniform(n: usize) -> HostTensor {
    HostTensor::filled(1, n, 1.0 / n as f64).expect("valid shape")
}

/// Rank vector (1 x n) after `iterations` damped power-method steps on the
/// device. The adjacency matrix is column-normalized internally.
pub fn pagerank(rt: &Runtime, adjacency: &HostTensor, iterations: usize) -> Result<HostTensor> {
    if adjacency.rows() != adjacency.cols() {
        return Err(Error::invalid_input(format!(
            "adjacency must be square, got {}",
            adjacency.shape()
        )));
    }
    let n = adjacency.rows();
    let m = column_stochastic(adjacency);
    let mut x = uniform(n);
    if iterations == 0 {
        return Ok(x);
    }
    // One fully-connected per iteration: y^T = x^T M^T.
    let mt = super::upload(rt, &m.transpose())?;
    for _ in 0..iterations {
        let bx = super::upload(rt, &x)?;
        let mut y = super::run_op(
            rt,
            OpKind::FullyConnected,
            &QuantFlags::default(),
            &[bx, mt],
            TensorShape::new(1, n)?,
        )?;
        finish_step(&mut y);
        x = y;
    }
    Ok(x)
}

/// Float64 reference with identical normalization, damping, and iteration
/// count.
pub fn pagerank_reference(adjacency: &HostTensor, iterations: usize) -> Result<HostTensor> {
    if adjacency.rows() != adjacency.cols() {
        return Err(Error::invalid_input("adjacency must be square"));
    }
    let m = column_stochastic(adjacency);
    let mut x = uniform(adjacency.rows());
    for _ in 0..iterations {
        x = power_step(&m, &x);
    }
    Ok(x)
}

#[allow(dead_code)]
fn matvec_check(m: &HostTensor, x: &HostTensor) -> HostTensor {
    oracle::gemm(x, &m.transpose()).expect("shapes agree")
}
