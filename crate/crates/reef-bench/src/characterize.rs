//! The two-phase instruction characterization loop.
//!
//! For an instruction kind and input shape: load the operands, execute the
//! instruction 10,000 times against the simulated clock for the first
//! end-to-end latency, then repeat with 20,000 executions. The difference
//! isolates per-instruction throughput from the one-time transfer cost:
//!
//! ```text
//! OPS = 10_000 / (t2 - t1)
//! RPS = (r2 - r1) / (t2 - t1)
//! data-exchange rate = s / (t1 - (t2 - t1))
//! ```
//!
//! The last denominator is the transfer time left after subtracting the
//! steady-state compute; it can go non-positive when compute dominates, in
//! which case the rate is reported as unavailable.

use serde::Serialize;

use reef_core::device::{DeviceProfile, DeviceState, InstrParams, Instruction, InstructionKind};
use reef_core::error::Result;
use reef_core::quant::{quantize, QuantParams};
use reef_core::tensor::TensorShape;
use reef_core::HostTensor;

pub const PHASE_ONE_OPS: u64 = 10_000;
pub const PHASE_TWO_OPS: u64 = 20_000;

#[derive(Debug, Clone, Serialize)]
pub struct Characterization {
    pub op: InstructionKind,
    pub rows: usize,
    pub cols: usize,
    /// Total operand bytes transferred per phase.
    pub input_bytes: usize,
    pub t1_us: f64,
    pub t2_us: f64,
    pub r1: u64,
    pub r2: u64,
    pub ops_per_second: f64,
    pub results_per_second: f64,
    /// Bytes per second; `None` when compute swamped the transfer term.
    pub data_exchange_rate: Option<f64>,
}

struct OpSetup {
    operands: Vec<HostTensor>,
    params: InstrParams,
    out_params: QuantParams,
}

fn setup(kind: InstructionKind, rows: usize, cols: usize) -> Result<OpSetup> {
    let input = HostTensor::random_uniform(rows, cols, 0.0, 100.0, 7)?;
    let qp_in = QuantParams::for_range(0.0, 100.0);
    let _ = qp_in;
    let make = |t: &HostTensor| t.clone();
    let setup = match kind {
        InstructionKind::Conv2d => OpSetup {
            operands: vec![make(&input), HostTensor::random_uniform(3, 3, 0.0, 1.0, 8)?],
            params: InstrParams::Stride(1, 1),
            out_params: QuantParams::for_output_bound(9.0 * 100.0, false),
        },
        InstructionKind::FullyConnected => OpSetup {
            operands: vec![
                HostTensor::random_uniform(1, rows, 0.0, 100.0, 9)?,
                make(&input),
            ],
            params: InstrParams::None,
            out_params: QuantParams::for_output_bound(rows as f64 * 100.0 * 100.0, false),
        },
        InstructionKind::Add | InstructionKind::Sub | InstructionKind::Mul => OpSetup {
            operands: vec![
                make(&input),
                HostTensor::random_uniform(rows, cols, 0.0, 100.0, 10)?,
            ],
            params: InstrParams::None,
            out_params: QuantParams::for_output_bound(
                if kind == InstructionKind::Mul {
                    100.0 * 100.0
                } else {
                    200.0
                },
                kind == InstructionKind::Sub,
            ),
        },
        InstructionKind::Mean
        | InstructionKind::Max
        | InstructionKind::Tanh
        | InstructionKind::Relu => OpSetup {
            operands: vec![make(&input)],
            params: InstrParams::None,
            out_params: QuantParams::for_range(0.0, 100.0),
        },
        InstructionKind::Crop => OpSetup {
            operands: vec![make(&input)],
            params: InstrParams::Window {
                row0: 0,
                col0: 0,
                rows: rows.min(8),
                cols: cols.min(8),
            },
            out_params: QuantParams::for_range(0.0, 100.0),
        },
        InstructionKind::Ext => OpSetup {
            operands: vec![make(&input)],
            params: InstrParams::Target {
                rows: rows + 8,
                cols: cols + 8,
            },
            out_params: QuantParams::for_range(0.0, 100.0),
        },
    };
    Ok(setup)
}

/// One measurement phase: fresh device, transfer the operands, run the
/// instruction `n` times. Returns (end-to-end simulated time in us, result
/// values produced).
fn phase(
    profile: &DeviceProfile,
    op: &OpSetup,
    kind: InstructionKind,
    n: u64,
) -> Result<(f64, u64, usize)> {
    let mut dev = DeviceState::new(profile.clone(), false);
    let qp = QuantParams::for_range(0.0, 100.0);
    let mut bytes = 0;
    let mut ids = Vec::new();
    for (i, t) in op.operands.iter().enumerate() {
        let block = quantize(t, &qp).block;
        bytes += block.byte_size();
        dev.load(i as u64 + 1, block)?;
        ids.push(i as u64 + 1);
    }
    let instr = Instruction {
        kind,
        operands: ids,
        params: op.params,
        out_params: op.out_params,
    };
    let mut results = 0u64;
    let mut out_shape = TensorShape::new(1, 1)?;
    for _ in 0..n {
        let out = dev.execute(&instr)?;
        results += out.shape.len() as u64;
        out_shape = out.shape;
    }
    let _ = out_shape;
    Ok((dev.clock_us(), results, bytes))
}

pub fn characterize(
    profile: &DeviceProfile,
    kind: InstructionKind,
    rows: usize,
    cols: usize,
) -> Result<Characterization> {
    let op = setup(kind, rows, cols)?;
    let (t1_us, r1, input_bytes) = phase(profile, &op, kind, PHASE_ONE_OPS)?;
    let (t2_us, r2, _) = phase(profile, &op, kind, PHASE_TWO_OPS)?;
    let dt_s = (t2_us - t1_us) / 1e6;
    let ops_per_second = PHASE_ONE_OPS as f64 / dt_s;
    let results_per_second = (r2 - r1) as f64 / dt_s;
    let transfer_s = (t1_us - (t2_us - t1_us)) / 1e6;
    let data_exchange_rate = if transfer_s > 0.0 {
        Some(input_bytes as f64 / transfer_s)
    } else {
        None
    };
    Ok(Characterization {
        op: kind,
        rows,
        cols,
        input_bytes,
        t1_us,
        t2_us,
        r1,
        r2,
        ops_per_second,
        results_per_second,
        data_exchange_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_profile_ops_exactly() {
        let profile = DeviceProfile::default();
        for kind in InstructionKind::ALL {
            let c = characterize(&profile, kind, 12, 12).unwrap();
            let want = profile.ops(kind);
            let rel = (c.ops_per_second - want).abs() / want;
            assert!(rel < 1e-3, "{kind}: got {} want {want}", c.ops_per_second);
        }
    }

    #[test]
    fn rps_is_ops_times_output_count_for_add() {
        let profile = DeviceProfile::default();
        let c = characterize(&profile, InstructionKind::Add, 32, 48).unwrap();
        let expected = c.ops_per_second * (32.0 * 48.0);
        assert!((c.results_per_second - expected).abs() / expected < 1e-9);
    }

    #[test]
    fn transfer_rate_closure() {
        // Crop keeps the per-execution cost negligible while the 1 MiB
        // operand pins the transfer term.
        let profile = DeviceProfile::default();
        let c = characterize(&profile, InstructionKind::Crop, 1024, 1024).unwrap();
        assert_eq!(c.input_bytes, 1 << 20);
        // 1 MiB at 6 ms/MB.
        let want = (1 << 20) as f64 / 6e-3;
        let got = c.data_exchange_rate.unwrap();
        assert!((got - want).abs() / want < 1e-3, "got {got} want {want}");
    }
}
