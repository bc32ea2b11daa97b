//! Emulator and offload runtime for an Edge-class 8-bit matrix accelerator.
//!
//! The crate is organized as a stack:
//!
//! * [`tensor`] / [`metrics`] / [`oracle`] — host-side matrices, range
//!   statistics, accuracy metrics, and float64 reference implementations of
//!   every device operation and application kernel.
//! * [`quant`] — scale-factor selection and 8-bit quantization.
//! * [`device`] — a software model of one accelerator: its instruction set,
//!   on-chip memory budget, and a simulated-latency clock.
//! * [`codec`] — the bit-exact on-disk model-blob format.
//! * [`lower`] — rewrites programmer-level operations into tiled device
//!   instructions plus a host aggregation plan.
//! * [`runtime`] — buffers, the two-level task/instruction queues, and the
//!   multi-device scheduler.
//! * [`kernels`] — the application algorithms built on the runtime.
//!
//! Host math is generic over the scalar type via [`Scalar`]; the runtime and
//! kernels operate on the concrete [`HostTensor`] alias (f64).

pub mod codec;
pub mod config;
pub mod device;
pub mod error;
pub mod kernels;
pub mod lower;
pub mod metrics;
pub mod oracle;
pub mod quant;
pub mod runtime;
pub mod tensor;

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub use error::{Error, Result};
pub use tensor::{RangeStats, Tensor, TensorShape};

/// Scalar types the host-side tensor math is generic over.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + NumAssign + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
}

/// The application-visible data unit: a row-major real-valued matrix at
/// 64-bit precision.
pub type HostTensor = Tensor<f64>;

/// Single-precision variant, occasionally useful for experiments.
pub type HostTensorF32 = Tensor<f32>;

/// Seed used by every internal sampling decision unless a caller provides
/// its own. Recorded in run reports.
pub const DEFAULT_SEED: u64 = 42;
