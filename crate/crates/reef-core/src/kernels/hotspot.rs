//! Thermal stencil simulation: one 3x3 convolution per layer per step.

use crate::error::{Error, Result};
use crate::lower::{OpKind, QuantFlags};
use crate::oracle;
use crate::runtime::Runtime;
use crate::tensor::TensorShape;
use crate::HostTensor;

// Stencil weights (center, edge-neighbor, diagonal-neighbor). Dyadic values
// summing to exactly 1.0, so a uniform grid is an exact fixed point.
pub const W_CENTER: f64 = 0.625;
pub const W_EDGE: f64 = 0.0625;
pub const W_DIAG: f64 = 0.03125;
/// Scale of the per-cell power term added after each step.
pub const POWER_COUPLING: f64 = 0.5;

/// Declared range for quantizing the stencil kernel: with 255 codes over
/// [0, 255/32] the grid step is exactly 1/32, so the dyadic weights above
/// quantize without error.
pub const KERNEL_RANGE: f64 = 255.0 / 32.0;

pub fn stencil_kernel() -> HostTensor {
    HostTensor::from_rows(&[
        vec![W_DIAG, W_EDGE, W_DIAG],
        vec![W_EDGE, W_CENTER, W_EDGE],
        vec![W_DIAG, W_EDGE, W_DIAG],
    ])
    .expect("static kernel")
}

/// Pad by one cell on each side, replicating the border (boundary cells see
/// themselves where a neighbor is missing).
fn replicate_pad(t: &HostTensor) -> HostTensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = HostTensor::zeros(r + 2, c + 2).expect("valid shape");
    for i in 0..r + 2 {
        let si = i.saturating_sub(1).min(r - 1);
        for j in 0..c + 2 {
            let sj = j.saturating_sub(1).min(c - 1);
            out.set(i, j, t.get(si, sj));
        }
    }
    out
}

fn check_shapes(grid: &HostTensor, power: &HostTensor) -> Result<()> {
    if grid.rows() < 3 || grid.cols() < 3 {
        return Err(Error::invalid_shape(format!(
            "grid must be at least 3x3, got {}",
            grid.shape()
        )));
    }
    if power.shape() != grid.shape() {
        return Err(Error::invalid_shape(format!(
            "power grid {} does not match temperature grid {}",
            power.shape(),
            grid.shape()
        )));
    }
    Ok(())
}

/// `steps` stencil updates of the temperature grid on the device. Each step
/// runs one conv2d over the replicate-padded grid; the border padding,
/// interior crop, and power term are host-side work.
pub fn hotspot3d(
    rt: &Runtime,
    grid: &HostTensor,
    power: &HostTensor,
    steps: usize,
) -> Result<HostTensor> {
    check_shapes(grid, power)?;
    let (r, c) = (grid.rows(), grid.cols());
    let kernel = super::upload(rt, &stencil_kernel())?;
    let mut current = grid.clone();
    for _ in 0..steps {
        let padded = replicate_pad(&current);
        // The stencil output is a convex combination of temperatures, so the
        // observed range bounds it exactly.
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in current.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let flags = QuantFlags {
            input_ranges: [None, Some((0.0, KERNEL_RANGE))],
            output_range: Some((lo.min(0.0), hi)),
        };
        let bp = super::upload(rt, &padded)?;
        let conv = super::run_op(
            rt,
            OpKind::Conv2d { stride: (1, 1) },
            &flags,
            &[bp, kernel],
            TensorShape::new(r + 2, c + 2)?,
        )?;
        let mut next = HostTensor::zeros(r, c)?;
        for i in 0..r {
            for j in 0..c {
                next.set(i, j, conv.get(i, j) + POWER_COUPLING * power.get(i, j));
            }
        }
        current = next;
    }
    Ok(current)
}

/// Float64 reference: the same stencil loop via the convolution oracle.
pub fn hotspot3d_reference(
    grid: &HostTensor,
    power: &HostTensor,
    steps: usize,
) -> Result<HostTensor> {
    check_shapes(grid, power)?;
    let (r, c) = (grid.rows(), grid.cols());
    let kernel = stencil_kernel();
    let mut current = grid.clone();
    for _ in 0..steps {
        let padded = replicate_pad(&current);
        let conv = oracle::conv2d(&padded, &kernel, (1, 1))?;
        let mut next = HostTensor::zeros(r, c)?;
        for i in 0..r {
            for j in 0..c {
                next.set(i, j, conv.get(i, j) + POWER_COUPLING * power.get(i, j));
            }
        }
        current = next;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mape;

    #[test]
    fn uniform_grid_zero_power_is_fixed_point() {
        let grid = HostTensor::filled(8, 8, 330.0).unwrap();
        let power = HostTensor::zeros(8, 8).unwrap();
        let out = hotspot3d_reference(&grid, &power, 3).unwrap();
        for &v in out.data() {
            assert_eq!(v, 330.0);
        }
        let rt = Runtime::with_defaults();
        let dev = hotspot3d(&rt, &grid, &power, 3).unwrap();
        for &v in dev.data() {
            assert!((v - 330.0).abs() < 330.0 / 255.0 * 3.0);
        }
    }

    #[test]
    fn single_hot_cell_diffuses_per_stencil() {
        // Brute-force one step by hand.
        let mut grid = HostTensor::filled(5, 5, 0.0).unwrap();
        grid.set(2, 2, 100.0);
        let power = HostTensor::zeros(5, 5).unwrap();
        let out = hotspot3d_reference(&grid, &power, 1).unwrap();
        assert_eq!(out.get(2, 2), 100.0 * W_CENTER);
        assert_eq!(out.get(1, 2), 100.0 * W_EDGE);
        assert_eq!(out.get(1, 1), 100.0 * W_DIAG);
        assert_eq!(out.get(0, 0), 0.0);
    }

    #[test]
    fn one_device_step_matches_oracle_within_quantization() {
        let grid = HostTensor::random_uniform(32, 32, 320.0, 340.0, 41).unwrap();
        let power = HostTensor::random_uniform(32, 32, 0.0, 1.0, 42).unwrap();
        let rt = Runtime::with_defaults();
        let got = hotspot3d(&rt, &grid, &power, 1).unwrap();
        let want = hotspot3d_reference(&grid, &power, 1).unwrap();
        // Input step 340/255 plus output step 340/255.
        let tol = 2.0 * 340.0 / 255.0;
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= tol);
        }
        assert!(mape(&want, &got, 1e-9).unwrap() < 0.005);
    }

    #[test]
    fn small_grid_rejected() {
        let rt = Runtime::with_defaults();
        let grid = HostTensor::filled(2, 5, 1.0).unwrap();
        let power = HostTensor::filled(2, 5, 0.0).unwrap();
        assert!(hotspot3d(&rt, &grid, &power, 1).is_err());
    }

    #[test]
    fn device_trace_is_conv2d_only() {
        use crate::device::InstructionKind;
        let rt = Runtime::with_defaults();
        let grid = HostTensor::random_uniform(16, 16, 320.0, 340.0, 43).unwrap();
        let power = HostTensor::zeros(16, 16).unwrap();
        hotspot3d(&rt, &grid, &power, 2).unwrap();
        for stats in rt.device_stats() {
            for kind in stats.exec_counts.keys() {
                assert_eq!(*kind, InstructionKind::Conv2d);
            }
        }
    }
}
