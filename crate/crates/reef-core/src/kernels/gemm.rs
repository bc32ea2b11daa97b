//! General matrix multiply as a library call.

use crate::error::Result;
use crate::lower::{OpKind, QuantFlags};
use crate::runtime::Runtime;
use crate::HostTensor;

/// `A (MxN) * B (NxK)` on the device.
///
/// The lowering partitions both matrices into 128-edge blocks; each block
/// product runs as one strided convolution per output column over the
/// stacked-row layout of the A block (or as per-row fully-connected
/// instructions when the inner dimension is under 8), and the host sums the
/// dequantized partials in f64.
pub fn tpu_gemm(
    rt: &Runtime,
    a: &HostTensor,
    b: &HostTensor,
    flags: &QuantFlags,
) -> Result<HostTensor> {
    let ba = super::upload(rt, a)?;
    let bb = super::upload(rt, b)?;
    let out_shape = crate::tensor::TensorShape::new(a.rows(), b.cols())?;
    super::run_op(rt, OpKind::Matmul, flags, &[ba, bb], out_shape)
}
