//! Scale-factor selection and 8-bit quantization.
//!
//! Two parameter constructions exist:
//!
//! * **Affine input mapping** ([`QuantParams::for_input`] /
//!   [`QuantParams::for_range`]): the declared range, nudged to contain zero,
//!   is mapped onto the full `[0, 255]` code span. Round-trip error is at most
//!   half a step, `range / 510`.
//! * **Worst-case output mapping** ([`scale_factor`]): the scale is derived
//!   from the operator-specific output bound, so that no representable input
//!   can saturate the requantized result. Signed outputs keep one code of
//!   headroom on each side.

use serde::{Deserialize, Serialize};

use crate::device::InstructionKind;
use crate::error::{Error, Result};
use crate::tensor::{RangeStats, Tensor, TensorShape};
use crate::HostTensor;

/// Quantization parameters for one tensor (an operator input or output).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    /// Unit normalizer `S`: the reciprocal of the declared range span for
    /// inputs, or of the worst-case output magnitude for outputs.
    pub scale: f64,
    /// Codes per unit value; what [`quantize`] multiplies by.
    pub code_scale: f64,
    pub zero_point: u8,
    pub declared_range: (f64, f64),
    /// Set when a zero-width range forced the unit-scale fallback.
    pub degenerate: bool,
}

/// Nudge a range so it contains zero; quantization grids always represent
/// exact zero at the zero point.
fn nudge(lo: f64, hi: f64) -> (f64, f64) {
    (lo.min(0.0), hi.max(0.0))
}

impl QuantParams {
    /// Full-span affine parameters for values in `[stats.min, stats.max]`.
    pub fn for_input(stats: &RangeStats) -> QuantParams {
        Self::for_range(stats.min, stats.max)
    }

    /// Full-span affine parameters for an explicitly declared range.
    pub fn for_range(lo: f64, hi: f64) -> QuantParams {
        let (lo, hi) = nudge(lo, hi);
        let span = hi - lo;
        let (span, degenerate) = if span > 0.0 {
            (span, false)
        } else {
            (1.0, true)
        };
        let code_scale = 255.0 / span;
        let zero_point = (-lo * code_scale).round().clamp(0.0, 255.0) as u8;
        QuantParams {
            scale: 1.0 / span,
            code_scale,
            zero_point,
            declared_range: (lo, hi),
            degenerate,
        }
    }

    /// Output parameters for a worst-case magnitude bound. `signed` selects
    /// whether negative results are representable.
    pub fn for_output_bound(bound: f64, signed: bool) -> QuantParams {
        let (bound, degenerate) = if bound > 0.0 {
            (bound, false)
        } else {
            (1.0, true)
        };
        let scale = 1.0 / bound;
        if signed {
            QuantParams {
                scale,
                code_scale: 127.0 * scale,
                zero_point: 128,
                declared_range: (-bound, bound),
                degenerate,
            }
        } else {
            QuantParams {
                scale,
                code_scale: 255.0 * scale,
                zero_point: 0,
                declared_range: (0.0, bound),
                degenerate,
            }
        }
    }

    /// Quantization step in real units.
    pub fn step(&self) -> f64 {
        1.0 / self.code_scale
    }
}

fn span_of(stats: &RangeStats) -> f64 {
    let (lo, hi) = nudge(stats.min, stats.max);
    hi - lo
}

/// Worst-case output magnitude for one instruction, given the (nudged) input
/// range spans. `inner_dim` is the number of accumulated terms for matrix
/// instructions. With a single shared range `R` this reduces to the
/// per-operator rules: `R^2 * N` for conv2d/fully_connected, `2R` for
/// add/sub, `R^2` for mul, and `R` otherwise.
pub fn output_bound(kind: InstructionKind, ra: f64, rb: Option<f64>, inner_dim: usize) -> f64 {
    let rb = rb.unwrap_or(ra);
    match kind {
        InstructionKind::Conv2d | InstructionKind::FullyConnected => {
            ra * rb * inner_dim.max(1) as f64
        }
        InstructionKind::Add | InstructionKind::Sub => 2.0 * ra.max(rb),
        InstructionKind::Mul => ra * rb,
        _ => ra.max(rb),
    }
}

/// Operator-specific output quantization parameters.
///
/// Returns the unit-normalizing scale `S = 1 / bound` together with a
/// zero point chosen from the sign of the inputs: non-negative inputs under
/// sign-preserving operators yield `zero_point = 0`, everything else uses the
/// symmetric layout around 128. A zero-width range falls back to unit scale
/// and is flagged via [`QuantParams::degenerate`].
pub fn scale_factor(
    kind: InstructionKind,
    stats_a: &RangeStats,
    stats_b: Option<&RangeStats>,
    inner_dim: usize,
) -> Result<QuantParams> {
    if inner_dim == 0 {
        return Err(Error::invalid_input("inner_dim must be >= 1"));
    }
    let ra = span_of(stats_a);
    let rb = stats_b.map(span_of);
    let bound = output_bound(kind, ra, rb, inner_dim);
    let inputs_nonneg = stats_a.min >= 0.0 && stats_b.is_none_or(|s| s.min >= 0.0);
    // `sub` produces signed output even from non-negative inputs.
    let signed = !inputs_nonneg || kind == InstructionKind::Sub;
    Ok(QuantParams::for_output_bound(bound, signed))
}

/// Worst-case bound composed along an operator chain, starting from inputs
/// bounded by `r`. Matrix operators square the running bound and multiply by
/// the inner dimension; add/sub double it; mul squares it.
pub fn chain_bound(kinds: &[InstructionKind], r: f64, inner_dim: usize) -> f64 {
    let mut b = r;
    for &kind in kinds {
        b = output_bound(kind, b, None, inner_dim);
    }
    b
}

/// 8-bit tile together with the factors that map codes back to reals: the
/// device-visible data unit. `scale` is codes per unit value, so
/// `real = (code - zero_point) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub shape: TensorShape,
    pub values: Vec<u8>,
    pub scale: f64,
    pub zero_point: u8,
}

impl QuantizedBlock {
    pub fn new(shape: TensorShape, values: Vec<u8>, scale: f64, zero_point: u8) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::invalid_shape(format!(
                "code count {} does not match shape {}",
                values.len(),
                shape
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid_input(format!(
                "scale must be positive, got {scale}"
            )));
        }
        Ok(QuantizedBlock {
            shape,
            values,
            scale,
            zero_point,
        })
    }

    pub fn byte_size(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn code(&self, r: usize, c: usize) -> u8 {
        self.values[r * self.shape.cols + c]
    }

    #[inline]
    pub fn real(&self, r: usize, c: usize) -> f64 {
        (self.code(r, c) as f64 - self.zero_point as f64) / self.scale
    }
}

/// Result of quantizing a tensor: the block plus how many values fell outside
/// the declared range and were clamped.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub block: QuantizedBlock,
    pub clamped: u64,
}

/// `code = clamp(round(value * code_scale) + zero_point, 0, 255)`.
/// Values outside the declared range clamp; the count is reported, not fatal.
pub fn quantize(t: &HostTensor, qp: &QuantParams) -> Quantized {
    let zp = qp.zero_point as f64;
    let mut clamped = 0u64;
    let values = t
        .data()
        .iter()
        .map(|&v| {
            let code = (v * qp.code_scale).round() + zp;
            if (0.0..=255.0).contains(&code) {
                code as u8
            } else {
                clamped += 1;
                code.clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    Quantized {
        block: QuantizedBlock::new(t.shape(), values, qp.code_scale, qp.zero_point)
            .expect("shape preserved"),
        clamped,
    }
}

/// Inverse of [`quantize`] up to one quantization step.
pub fn dequantize(block: &QuantizedBlock) -> HostTensor {
    let zp = block.zero_point as f64;
    let data = block
        .values
        .iter()
        .map(|&q| (q as f64 - zp) / block.scale)
        .collect();
    Tensor::new(block.shape, data).expect("finite by construction")
}
