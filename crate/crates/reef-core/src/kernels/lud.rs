//! LU factorization by scalar recursion on the device: crop the pivot, the
//! pivot row, and the pivot column, then rank-1-update the trailing matrix.

use crate::error::{Error, Result};
use crate::lower::{OpKind, QuantFlags};
use crate::runtime::Runtime;
use crate::HostTensor;

const PIVOT_TOL: f64 = 1e-12;

/// Doolittle factorization `A = L * U` (unit-lower `L`) without pivoting.
///
/// Each iteration crops the top-left 1x1 pivot, the 1xN top row, and the Mx1
/// left column on the device, divides the column by the pivot on the host,
/// and subtracts the outer product from the trailing submatrix. The outer
/// product has inner dimension 1, so it lowers to per-row fully-connected
/// instructions; matrix products with inner dimension 8 or more would take
/// the convolution path instead.
pub fn lud(rt: &Runtime, a: &HostTensor, flags: &QuantFlags) -> Result<(HostTensor, HostTensor)> {
    if a.rows() != a.cols() {
        return Err(Error::invalid_shape(format!(
            "lud input must be square, got {}",
            a.shape()
        )));
    }
    let n = a.rows();
    let mut w = a.clone();
    let mut l = HostTensor::zeros(n, n)?;
    let mut u = HostTensor::zeros(n, n)?;
    for k in 0..n {
        l.set(k, k, 1.0);
    }
    let flags = *flags;
    for k in 0..n {
        let m = n - k;
        if w.get(k, k).abs() < PIVOT_TOL {
            return Err(Error::SingularMatrix(k));
        }
        let active = w.window(k, k, m, m)?;
        let b_active = super::upload(rt, &active)?;
        let d_atl = rt.alloc_dimension(1, 1)?;
        let b_atl = rt.create_buffer(&d_atl, None)?;
        if m == 1 {
            let t = rt.enqueue(move |ctx| {
                ctx.invoke_operator(
                    OpKind::Crop {
                        row0: 0,
                        col0: 0,
                        rows: 1,
                        cols: 1,
                    },
                    &flags,
                    &[b_active],
                    b_atl,
                )
            });
            rt.wait(t.task_id)?;
            u.set(k, k, rt.read_buffer(b_atl)?.get(0, 0));
            break;
        }
        let d_atr = rt.alloc_dimension(1, m - 1)?;
        let d_abl = rt.alloc_dimension(m - 1, 1)?;
        let d_upd = rt.alloc_dimension(m - 1, m - 1)?;
        let b_atr = rt.create_buffer(&d_atr, None)?;
        let b_abl = rt.create_buffer(&d_abl, None)?;
        let b_upd = rt.create_buffer(&d_upd, None)?;
        let t = rt.enqueue(move |ctx| {
            ctx.invoke_operator(
                OpKind::Crop {
                    row0: 0,
                    col0: 0,
                    rows: 1,
                    cols: 1,
                },
                &flags,
                &[b_active],
                b_atl,
            )?;
            ctx.invoke_operator(
                OpKind::Crop {
                    row0: 0,
                    col0: 1,
                    rows: 1,
                    cols: m - 1,
                },
                &flags,
                &[b_active],
                b_atr,
            )?;
            ctx.invoke_operator(
                OpKind::Crop {
                    row0: 1,
                    col0: 0,
                    rows: m - 1,
                    cols: 1,
                },
                &flags,
                &[b_active],
                b_abl,
            )?;
            let rtm = ctx.runtime();
            let pivot = rtm.read_buffer(b_atl)?.get(0, 0);
            if pivot == 0.0 {
                return Err(Error::SingularMatrix(k));
            }
            let lcol = rtm.read_buffer(b_abl)?.map(|v| v / pivot);
            let b_lcol = super::upload(rtm, &lcol)?;
            ctx.invoke_operator(OpKind::Matmul, &flags, &[b_lcol, b_atr], b_upd)
        });
        rt.wait(t.task_id)?;

        let pivot = rt.read_buffer(b_atl)?.get(0, 0);
        let atr = rt.read_buffer(b_atr)?;
        let abl = rt.read_buffer(b_abl)?;
        let update = rt.read_buffer(b_upd)?;
        u.set(k, k, pivot);
        for j in 0..m - 1 {
            u.set(k, k + 1 + j, atr.get(0, j));
        }
        for i in 0..m - 1 {
            l.set(k + 1 + i, k, abl.get(i, 0) / pivot);
        }
        for i in 0..m - 1 {
            for j in 0..m - 1 {
                let cur = w.get(k + 1 + i, k + 1 + j);
                w.set(k + 1 + i, k + 1 + j, cur - update.get(i, j));
            }
        }
    }
    Ok((l, u))
}

/// Float64 Doolittle factorization without pivoting.
pub fn lud_reference(a: &HostTensor) -> Result<(HostTensor, HostTensor)> {
    if a.rows() != a.cols() {
        return Err(Error::invalid_shape("lud input must be square"));
    }
    let n = a.rows();
    let mut w = a.clone();
    let mut l = HostTensor::zeros(n, n)?;
    let mut u = HostTensor::zeros(n, n)?;
    for k in 0..n {
        l.set(k, k, 1.0);
        let pivot = w.get(k, k);
        if pivot.abs() < PIVOT_TOL {
            return Err(Error::SingularMatrix(k));
        }
        for j in k..n {
            u.set(k, j, w.get(k, j));
        }
        for i in k + 1..n {
            let mult = w.get(i, k) / pivot;
            l.set(i, k, mult);
            for j in k + 1..n {
                let cur = w.get(i, j);
                w.set(i, j, cur - mult * w.get(k, j));
            }
        }
    }
    Ok((l, u))
}
