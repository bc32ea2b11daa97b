//! The application algorithms, each expressed against the runtime API, with
//! a full-precision reference implementation alongside for accuracy
//! comparisons.

pub mod backprop;
pub mod blackscholes;
pub mod gaussian;
pub mod gemm;
pub mod hotspot;
pub mod inputs;
pub mod lud;
pub mod pagerank;

pub use backprop::{backprop, backprop_reference, BackpropNet};
pub use blackscholes::{blackscholes, blackscholes_reference, generate_options};
pub use gaussian::{gaussian, gaussian_reference};
pub use gemm::tpu_gemm;
pub use hotspot::{hotspot3d, hotspot3d_reference};
pub use lud::{lud, lud_reference};
pub use pagerank::{pagerank, pagerank_reference};

use crate::error::Result;
use crate::lower::{OpKind, QuantFlags};
use crate::runtime::{BufferId, Runtime};
use crate::tensor::TensorShape;
use crate::HostTensor;

/// Run one operator as its own task and read the result back.
pub(crate) fn run_op(
    rt: &Runtime,
    kind: OpKind,
    flags: &QuantFlags,
    inputs: &[BufferId],
    out_shape: TensorShape,
) -> Result<HostTensor> {
    let dim = rt.alloc_dimension(out_shape.rows, out_shape.cols)?;
    let out = rt.create_buffer(&dim, None)?;
    let flags = *flags;
    let inputs = inputs.to_vec();
    let t = rt.enqueue(move |ctx| ctx.invoke_operator(kind, &flags, &inputs, out));
    rt.wait(t.task_id)?;
    rt.read_buffer(out)
}

pub(crate) fn upload(rt: &Runtime, t: &HostTensor) -> Result<BufferId> {
    let dim = rt.alloc_dimension(t.rows(), t.cols())?;
    rt.create_buffer(&dim, Some(t))
}
