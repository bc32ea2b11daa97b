//! Rewrites a programmer-level operation into a tiled program of device
//! instructions plus a host aggregation plan.
//!
//! Pairwise and element-wise operations tile to the profile's arithmetic
//! tile edge (128 by default) with no aggregation beyond reassembly. Mean and
//! max favor 64x64 tiles with a host reduction of the per-tile results.
//! Matrix products use a blocked decomposition whose partial results the
//! host sums in f64 after dequantization, since host registers are wider
//! than the device's 8-bit precision. Each block product is realized either
//! as one strided convolution per output column (the stacked-row layout) or,
//! when the inner dimension is below [`FC_INNER_LIMIT`], as one
//! fully-connected instruction per row.
//!
//! Replaying a program with the float64 oracle per step
//! ([`replay_program`]) reproduces the whole-operation oracle exactly in
//! real arithmetic; this is what makes the tiling and the stacked/kernel
//! construction independently testable.

use crate::device::{DeviceProfile, InstrParams, InstructionKind};
use crate::error::{Error, Result};
use crate::oracle;
use crate::quant::QuantParams;
use crate::tensor::{Tensor, TensorShape};
use crate::Scalar;

/// Matrix products with inner dimension below this are realized with
/// fully-connected instructions instead of the convolution construction.
pub const FC_INNER_LIMIT: usize = 8;

/// Programmer-visible operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    /// General matrix multiply `A (MxN) * B (NxK)`.
    Matmul,
    /// Strided 2-D convolution of an image by one kernel.
    Conv2d {
        stride: (usize, usize),
    },
    /// Vector-matrix product `v (1xN) * M (NxK)`.
    FullyConnected,
    Add,
    Sub,
    Mul,
    Tanh,
    Relu,
    Mean,
    Max,
    Crop {
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    },
    Ext {
        rows: usize,
        cols: usize,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::FullyConnected => "fully_connected",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Mean => "mean",
            OpKind::Max => "max",
            OpKind::Crop { .. } => "crop",
            OpKind::Ext { .. } => "ext",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpKind::Matmul | OpKind::Conv2d { .. } | OpKind::FullyConnected => 2,
            OpKind::Add | OpKind::Sub | OpKind::Mul => 2,
            _ => 1,
        }
    }

    /// Instruction kind whose scale rule governs this operation's output.
    pub fn scale_kind(&self) -> InstructionKind {
        match self {
            OpKind::Matmul => InstructionKind::Conv2d,
            OpKind::Conv2d { .. } => InstructionKind::Conv2d,
            OpKind::FullyConnected => InstructionKind::FullyConnected,
            OpKind::Add => InstructionKind::Add,
            OpKind::Sub => InstructionKind::Sub,
            OpKind::Mul => InstructionKind::Mul,
            OpKind::Tanh => InstructionKind::Tanh,
            OpKind::Relu => InstructionKind::Relu,
            OpKind::Mean => InstructionKind::Mean,
            OpKind::Max => InstructionKind::Max,
            OpKind::Crop { .. } => InstructionKind::Crop,
            OpKind::Ext { .. } => InstructionKind::Ext,
        }
    }

    /// Accumulated terms per output element, for the scale rule.
    pub fn inner_dim(&self, shapes: &[TensorShape]) -> usize {
        match self {
            OpKind::Matmul | OpKind::FullyConnected => shapes[0].cols,
            OpKind::Conv2d { .. } => shapes[1].len(),
            _ => 1,
        }
    }
}

/// Per-operation quantization controls carried by a task entry.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QuantFlags {
    /// Declared range override per input; `None` means measured statistics.
    pub input_ranges: [Option<(f64, f64)>; 2],
    /// Declared range override for the output. When set, the output is
    /// quantized with the full-span affine mapping for that range instead of
    /// the worst-case bound rule.
    pub output_range: Option<(f64, f64)>,
}

impl QuantFlags {
    pub fn with_output_range(lo: f64, hi: f64) -> Self {
        QuantFlags {
            output_range: Some((lo, hi)),
            ..Default::default()
        }
    }

    pub fn with_all_ranges(lo: f64, hi: f64) -> Self {
        QuantFlags {
            input_ranges: [Some((lo, hi)), Some((lo, hi))],
            output_range: Some((lo, hi)),
        }
    }

    /// Stable fingerprint used in scheduler affinity keys.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bits: u64| {
            h ^= bits;
            h = h.wrapping_mul(0x100000001b3);
        };
        for r in self.input_ranges.iter().chain([&self.output_range]) {
            match r {
                None => eat(1),
                Some((lo, hi)) => {
                    eat(lo.to_bits());
                    eat(hi.to_bits());
                }
            }
        }
        h
    }
}

/// A rectangular view of one operation input, materialized at
/// `pad_rows x pad_cols` with zero padding beyond the logical rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileRef {
    pub input: usize,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_rows: usize,
    pub pad_cols: usize,
}

impl TileRef {
    pub fn full(input: usize, shape: TensorShape) -> TileRef {
        TileRef {
            input,
            row0: 0,
            col0: 0,
            rows: shape.rows,
            cols: shape.cols,
            pad_rows: shape.rows,
            pad_cols: shape.cols,
        }
    }

    fn rect(input: usize, row0: usize, col0: usize, rows: usize, cols: usize) -> TileRef {
        TileRef {
            input,
            row0,
            col0,
            rows,
            cols,
            pad_rows: rows,
            pad_cols: cols,
        }
    }

    fn padded(mut self, pad_rows: usize, pad_cols: usize) -> TileRef {
        self.pad_rows = pad_rows.max(self.rows);
        self.pad_cols = pad_cols.max(self.cols);
        self
    }
}

/// Where a step's (dequantized) result lands in the output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DestSlot {
    /// Write the result at `(row0, col0)`, clipped to `rows x cols`.
    Grid {
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    },
    /// Sum the clipped result into the region at `(row0, col0)`.
    Partial {
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    },
    /// Weighted term of a mean reduction, or candidate of a max reduction.
    Reduce { weight: f64 },
}

/// How one step is realized on the device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepKind {
    /// Exactly one device instruction.
    Single(InstructionKind),
    /// Block matrix product: one `conv2d` with stride `(s, s)` per column of
    /// the second operand, over the stacked-row layout of the first.
    MatmulConv { s: usize },
    /// Block matrix product: one `fully_connected` per row of the first
    /// operand.
    MatmulRows,
}

#[derive(Debug, Clone)]
pub struct ProgramStep {
    pub kind: StepKind,
    pub params: InstrParams,
    pub operands: Vec<TileRef>,
    pub dest: DestSlot,
}

impl ProgramStep {
    /// Number of device instructions this step expands to.
    pub fn micro_ops(&self) -> usize {
        match self.kind {
            StepKind::Single(_) => 1,
            StepKind::MatmulConv { .. } => self.operands[1].cols,
            StepKind::MatmulRows => self.operands[0].rows,
        }
    }

    pub fn micro_kind(&self) -> InstructionKind {
        match self.kind {
            StepKind::Single(k) => k,
            StepKind::MatmulConv { .. } => InstructionKind::Conv2d,
            StepKind::MatmulRows => InstructionKind::FullyConnected,
        }
    }
}

/// Host-side combination of the per-step results.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregation {
    /// Tiles assemble disjointly into the output.
    Assemble,
    /// Partial products at the same position are summed in f64.
    SumPartials,
    /// Weighted tile means divided by the total element count.
    MeanOfParts { divisor: f64 },
    /// Maximum over tile maxima.
    MaxOfParts,
}

/// The lowering output: ordered steps, the aggregation plan, the output
/// shape, and the quantization parameters everything runs under.
#[derive(Debug, Clone)]
pub struct InstructionProgram {
    pub op: OpKind,
    pub steps: Vec<ProgramStep>,
    pub aggregation: Aggregation,
    pub output_shape: TensorShape,
    pub input_params: Vec<QuantParams>,
    pub out_params: QuantParams,
}

impl InstructionProgram {
    /// IQ entries this program contributes.
    pub fn instruction_count(&self) -> usize {
        self.steps.len()
    }

    pub fn device_op_count(&self) -> usize {
        self.steps.iter().map(|s| s.micro_ops()).sum()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LowerOptions {
    /// Use the convolution construction even below [`FC_INNER_LIMIT`].
    pub force_conv_matmul: bool,
}

fn tiles(total: usize, tile: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < total {
        let len = tile.min(total - start);
        out.push((start, len));
        start += len;
    }
    out
}

/// Round-up square root: the block edge of the stacked-row layout.
pub fn block_edge(inner: usize) -> usize {
    let mut s = (inner as f64).sqrt() as usize;
    while s * s < inner {
        s += 1;
    }
    s.max(1)
}

/// Shape facts of the convolution construction for one matrix product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GemmPlan {
    pub inner: usize,
    /// `ceil(sqrt(inner))`; also both stride components.
    pub block_edge: usize,
    /// One kernel per output column.
    pub kernel_count: usize,
}

pub fn gemm_plan(inner: usize, out_cols: usize) -> GemmPlan {
    GemmPlan {
        inner,
        block_edge: block_edge(inner),
        kernel_count: out_cols,
    }
}

/// Reshape each row of `a` (row-major) into an `s x s` zero-padded block and
/// stack the blocks vertically: `m x n` becomes `m*s x s`.
pub fn stack_rows<T: Scalar>(a: &Tensor<T>, s: usize) -> Tensor<T> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(m * s, s).expect("valid shape");
    for r in 0..m {
        for j in 0..n {
            out.set(r * s + j / s, j % s, a.get(r, j));
        }
    }
    out
}

/// Fill column `col` of `b` (row-major) into an `s x s` zero-padded kernel,
/// mirroring the stacked-row layout so each strided window dot product
/// reproduces `sum_j a[r][j] * b[j][col]`.
pub fn column_kernel<T: Scalar>(b: &Tensor<T>, col: usize, s: usize) -> Tensor<T> {
    let n = b.rows();
    let mut out = Tensor::zeros(s, s).expect("valid shape");
    for j in 0..n {
        out.set(j / s, j % s, b.get(j, col));
    }
    out
}

/// Materialize a tile: the logical rectangle, zero-padded out to
/// `pad_rows x pad_cols`.
pub fn materialize_tile<T: Scalar>(inputs: &[&Tensor<T>], t: &TileRef) -> Result<Tensor<T>> {
    let src = inputs
        .get(t.input)
        .ok_or_else(|| Error::invalid_input("tile references missing input"))?;
    if t.row0 + t.rows > src.rows() || t.col0 + t.cols > src.cols() {
        return Err(Error::invalid_shape("tile rectangle outside input"));
    }
    let rect = src.window(t.row0, t.col0, t.rows, t.cols)?;
    if t.pad_rows > t.rows || t.pad_cols > t.cols {
        oracle::ext(&rect, t.pad_rows, t.pad_cols)
    } else {
        Ok(rect)
    }
}

pub fn lower(
    op: OpKind,
    shapes: &[TensorShape],
    profile: &DeviceProfile,
    input_params: Vec<QuantParams>,
    out_params: QuantParams,
) -> Result<InstructionProgram> {
    lower_opt(
        op,
        shapes,
        profile,
        input_params,
        out_params,
        LowerOptions::default(),
    )
}

pub fn lower_opt(
    op: OpKind,
    shapes: &[TensorShape],
    profile: &DeviceProfile,
    input_params: Vec<QuantParams>,
    out_params: QuantParams,
    opts: LowerOptions,
) -> Result<InstructionProgram> {
    if shapes.len() != op.arity() {
        return Err(Error::invalid_input(format!(
            "{} expects {} inputs, got {}",
            op.name(),
            op.arity(),
            shapes.len()
        )));
    }
    let t_arith = profile.arith_tile;
    let t_reduce = profile.reduce_tile;
    let (steps, aggregation, output_shape) = match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (shapes[0], shapes[1]);
            if a != b {
                return Err(Error::invalid_shape(format!(
                    "{} over mismatched shapes {a} vs {b}",
                    op.name()
                )));
            }
            let kind = op.scale_kind();
            let mut steps = Vec::new();
            for (r0, rl) in tiles(a.rows, t_arith) {
                for (c0, cl) in tiles(a.cols, t_arith) {
                    steps.push(ProgramStep {
                        kind: StepKind::Single(kind),
                        params: InstrParams::None,
                        operands: vec![
                            TileRef::rect(0, r0, c0, rl, cl).padded(t_arith, t_arith),
                            TileRef::rect(1, r0, c0, rl, cl).padded(t_arith, t_arith),
                        ],
                        dest: DestSlot::Grid {
                            row0: r0,
                            col0: c0,
                            rows: rl,
                            cols: cl,
                        },
                    });
                }
            }
            (steps, Aggregation::Assemble, a)
        }
        OpKind::Tanh | OpKind::Relu => {
            let a = shapes[0];
            let kind = op.scale_kind();
            let mut steps = Vec::new();
            for (r0, rl) in tiles(a.rows, t_arith) {
                for (c0, cl) in tiles(a.cols, t_arith) {
                    steps.push(ProgramStep {
                        kind: StepKind::Single(kind),
                        params: InstrParams::None,
                        operands: vec![TileRef::rect(0, r0, c0, rl, cl).padded(t_arith, t_arith)],
                        dest: DestSlot::Grid {
                            row0: r0,
                            col0: c0,
                            rows: rl,
                            cols: cl,
                        },
                    });
                }
            }
            (steps, Aggregation::Assemble, a)
        }
        OpKind::Mean => {
            let a = shapes[0];
            let mut steps = Vec::new();
            for (r0, rl) in tiles(a.rows, t_reduce) {
                for (c0, cl) in tiles(a.cols, t_reduce) {
                    // Zero padding adds nothing to the tile sum; the device
                    // mean over the padded tile times the padded count is the
                    // tile sum, and the host divides by the true total.
                    steps.push(ProgramStep {
                        kind: StepKind::Single(InstructionKind::Mean),
                        params: InstrParams::None,
                        operands: vec![TileRef::rect(0, r0, c0, rl, cl).padded(t_reduce, t_reduce)],
                        dest: DestSlot::Reduce {
                            weight: (t_reduce * t_reduce) as f64,
                        },
                    });
                }
            }
            (
                steps,
                Aggregation::MeanOfParts {
                    divisor: a.len() as f64,
                },
                TensorShape::new(1, 1)?,
            )
        }
        OpKind::Max => {
            // Max tiles stay unpadded: zero padding would beat an
            // all-negative tile's true maximum.
            let a = shapes[0];
            let mut steps = Vec::new();
            for (r0, rl) in tiles(a.rows, t_reduce) {
                for (c0, cl) in tiles(a.cols, t_reduce) {
                    steps.push(ProgramStep {
                        kind: StepKind::Single(InstructionKind::Max),
                        params: InstrParams::None,
                        operands: vec![TileRef::rect(0, r0, c0, rl, cl)],
                        dest: DestSlot::Reduce { weight: 1.0 },
                    });
                }
            }
            (steps, Aggregation::MaxOfParts, TensorShape::new(1, 1)?)
        }
        OpKind::FullyConnected => {
            let (v, m) = (shapes[0], shapes[1]);
            if v.rows != 1 {
                return Err(Error::invalid_shape("fully_connected input must be 1xN"));
            }
            if v.cols != m.rows {
                return Err(Error::invalid_shape(format!(
                    "fully_connected inner dimensions disagree: {v} vs {m}"
                )));
            }
            let mut steps = Vec::new();
            for (j0, jl) in tiles(v.cols, t_arith) {
                for (k0, kl) in tiles(m.cols, t_arith) {
                    steps.push(ProgramStep {
                        kind: StepKind::Single(InstructionKind::FullyConnected),
                        params: InstrParams::None,
                        operands: vec![
                            TileRef::rect(0, 0, j0, 1, jl).padded(1, t_arith),
                            TileRef::rect(1, j0, k0, jl, kl).padded(t_arith, t_arith),
                        ],
                        dest: DestSlot::Partial {
                            row0: 0,
                            col0: k0,
                            rows: 1,
                            cols: kl,
                        },
                    });
                }
            }
            (
                steps,
                Aggregation::SumPartials,
                TensorShape::new(1, m.cols)?,
            )
        }
        OpKind::Matmul => {
            let (a, b) = (shapes[0], shapes[1]);
            if a.cols != b.rows {
                return Err(Error::invalid_shape(format!(
                    "matmul inner dimensions disagree: {a} vs {b}"
                )));
            }
            let via_rows = a.cols < FC_INNER_LIMIT && !opts.force_conv_matmul;
            let mut steps = Vec::new();
            for (i0, il) in tiles(a.rows, t_arith) {
                for (j0, jl) in tiles(a.cols, t_arith) {
                    for (k0, kl) in tiles(b.cols, t_arith) {
                        let kind = if via_rows {
                            StepKind::MatmulRows
                        } else {
                            StepKind::MatmulConv { s: block_edge(jl) }
                        };
                        steps.push(ProgramStep {
                            kind,
                            params: InstrParams::None,
                            operands: vec![
                                TileRef::rect(0, i0, j0, il, jl),
                                TileRef::rect(1, j0, k0, jl, kl),
                            ],
                            dest: DestSlot::Partial {
                                row0: i0,
                                col0: k0,
                                rows: il,
                                cols: kl,
                            },
                        });
                    }
                }
            }
            (
                steps,
                Aggregation::SumPartials,
                TensorShape::new(a.rows, b.cols)?,
            )
        }
        OpKind::Conv2d { stride } => {
            let (input, kernel) = (shapes[0], shapes[1]);
            let (sx, sy) = stride;
            if sx == 0 || sy == 0 {
                return Err(Error::invalid_input("stride components must be >= 1"));
            }
            if kernel.rows > input.rows || kernel.cols > input.cols {
                return Err(Error::invalid_shape(format!(
                    "kernel {kernel} larger than input {input}"
                )));
            }
            let out_shape = TensorShape::new(input.rows.div_ceil(sx), input.cols.div_ceil(sy))?;
            let budget = profile.onchip_memory_bytes;
            let fits = input.len() + kernel.len() + out_shape.len() <= budget;
            let mut steps = Vec::new();
            if fits {
                steps.push(ProgramStep {
                    kind: StepKind::Single(InstructionKind::Conv2d),
                    params: InstrParams::Stride(sx, sy),
                    operands: vec![TileRef::full(0, input), TileRef::full(1, kernel)],
                    dest: DestSlot::Grid {
                        row0: 0,
                        col0: 0,
                        rows: out_shape.rows,
                        cols: out_shape.cols,
                    },
                });
            } else {
                // Split output rows into bands whose input slices (with a
                // kernel-height halo) fit on the device.
                let row_bytes = input.cols;
                let min_cost =
                    kernel.rows.min(input.rows) * row_bytes + kernel.len() + out_shape.cols;
                if min_cost > budget {
                    return Err(Error::DeviceMemoryFull {
                        needed: min_cost,
                        available: budget,
                        capacity: budget,
                    });
                }
                let mut band_out = 1usize;
                while band_out < out_shape.rows {
                    // band_out + 1 output rows need this many input rows
                    let next_rows = band_out * sx + kernel.rows;
                    let next_cost = next_rows.min(input.rows) * row_bytes
                        + kernel.len()
                        + (band_out + 1) * out_shape.cols;
                    if next_cost > budget {
                        break;
                    }
                    band_out += 1;
                }
                for (ob0, obl) in tiles(out_shape.rows, band_out) {
                    let in_r0 = ob0 * sx;
                    let in_rows = ((obl - 1) * sx + kernel.rows).min(input.rows - in_r0);
                    steps.push(ProgramStep {
                        kind: StepKind::Single(InstructionKind::Conv2d),
                        params: InstrParams::Stride(sx, sy),
                        operands: vec![
                            // Pad short final bands to the kernel height;
                            // the zero rows match the whole-input semantics.
                            TileRef::rect(0, in_r0, 0, in_rows, input.cols)
                                .padded(kernel.rows, input.cols),
                            TileRef::full(1, kernel),
                        ],
                        dest: DestSlot::Grid {
                            row0: ob0,
                            col0: 0,
                            rows: obl,
                            cols: out_shape.cols,
                        },
                    });
                }
            }
            (steps, Aggregation::Assemble, out_shape)
        }
        OpKind::Crop {
            row0,
            col0,
            rows,
            cols,
        } => {
            let a = shapes[0];
            if rows == 0 || cols == 0 {
                return Err(Error::invalid_input("crop window must be non-empty"));
            }
            if row0 + rows > a.rows || col0 + cols > a.cols {
                return Err(Error::invalid_shape(format!(
                    "crop window {rows}x{cols}@({row0},{col0}) outside {a}"
                )));
            }
            let out = TensorShape::new(rows, cols)?;
            let steps = vec![ProgramStep {
                kind: StepKind::Single(InstructionKind::Crop),
                params: InstrParams::Window {
                    row0,
                    col0,
                    rows,
                    cols,
                },
                operands: vec![TileRef::full(0, a)],
                dest: DestSlot::Grid {
                    row0: 0,
                    col0: 0,
                    rows,
                    cols,
                },
            }];
            (steps, Aggregation::Assemble, out)
        }
        OpKind::Ext { rows, cols } => {
            let a = shapes[0];
            if rows < a.rows || cols < a.cols {
                return Err(Error::invalid_shape(format!(
                    "ext target {rows}x{cols} smaller than source {a}"
                )));
            }
            let out = TensorShape::new(rows, cols)?;
            let steps = vec![ProgramStep {
                kind: StepKind::Single(InstructionKind::Ext),
                params: InstrParams::Target { rows, cols },
                operands: vec![TileRef::full(0, a)],
                dest: DestSlot::Grid {
                    row0: 0,
                    col0: 0,
                    rows,
                    cols,
                },
            }];
            (steps, Aggregation::Assemble, out)
        }
    };
    Ok(InstructionProgram {
        op,
        steps,
        aggregation,
        output_shape,
        input_params,
        out_params,
    })
}

/// Collects per-step results into the final output tensor.
pub struct Aggregator<T> {
    aggregation: Aggregation,
    out: Tensor<T>,
    reduce_acc: f64,
    reduce_seen: bool,
}

impl<T: Scalar> Aggregator<T> {
    pub fn new(program: &InstructionProgram) -> Result<Self> {
        Ok(Aggregator {
            aggregation: program.aggregation,
            out: Tensor::zeros(program.output_shape.rows, program.output_shape.cols)?,
            reduce_acc: match program.aggregation {
                Aggregation::MaxOfParts => f64::NEG_INFINITY,
                _ => 0.0,
            },
            reduce_seen: false,
        })
    }

    pub fn add(&mut self, step: &ProgramStep, result: &Tensor<T>) -> Result<()> {
        match step.dest {
            DestSlot::Grid {
                row0,
                col0,
                rows,
                cols,
            } => {
                for r in 0..rows.min(result.rows()) {
                    for c in 0..cols.min(result.cols()) {
                        self.out.set(row0 + r, col0 + c, result.get(r, c));
                    }
                }
            }
            DestSlot::Partial {
                row0,
                col0,
                rows,
                cols,
            } => {
                for r in 0..rows.min(result.rows()) {
                    for c in 0..cols.min(result.cols()) {
                        let cur = self.out.get(row0 + r, col0 + c);
                        self.out.set(row0 + r, col0 + c, cur + result.get(r, c));
                    }
                }
            }
            DestSlot::Reduce { weight } => {
                let v = result.get(0, 0).to_f64().unwrap();
                match self.aggregation {
                    Aggregation::MeanOfParts { .. } => self.reduce_acc += v * weight,
                    Aggregation::MaxOfParts => self.reduce_acc = self.reduce_acc.max(v),
                    _ => {
                        return Err(Error::invalid_input(
                            "reduce destination under non-reduce aggregation",
                        ))
                    }
                }
                self.reduce_seen = true;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<Tensor<T>> {
        match self.aggregation {
            Aggregation::MeanOfParts { divisor } => {
                if !self.reduce_seen {
                    return Err(Error::invalid_input("mean aggregation saw no parts"));
                }
                self.out
                    .set(0, 0, T::from_f64(self.reduce_acc / divisor).unwrap());
            }
            Aggregation::MaxOfParts => {
                if !self.reduce_seen {
                    return Err(Error::invalid_input("max aggregation saw no parts"));
                }
                self.out.set(0, 0, T::from_f64(self.reduce_acc).unwrap());
            }
            _ => {}
        }
        Ok(self.out)
    }
}

/// Execute one step in real arithmetic over the materialized tiles.
pub fn replay_step<T: Scalar>(step: &ProgramStep, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match step.kind {
        StepKind::Single(kind) => {
            let a = materialize_tile(inputs, &step.operands[0])?;
            match kind {
                InstructionKind::Conv2d => {
                    let k = materialize_tile(inputs, &step.operands[1])?;
                    let stride = match step.params {
                        InstrParams::Stride(sx, sy) => (sx, sy),
                        _ => (1, 1),
                    };
                    oracle::conv2d(&a, &k, stride)
                }
                InstructionKind::FullyConnected => {
                    let m = materialize_tile(inputs, &step.operands[1])?;
                    oracle::gemm(&a, &m)
                }
                InstructionKind::Add => {
                    let b = materialize_tile(inputs, &step.operands[1])?;
                    oracle::pairwise(crate::device::PairwiseKind::Add, &a, &b)
                }
                InstructionKind::Sub => {
                    let b = materialize_tile(inputs, &step.operands[1])?;
                    oracle::pairwise(crate::device::PairwiseKind::Sub, &a, &b)
                }
                InstructionKind::Mul => {
                    let b = materialize_tile(inputs, &step.operands[1])?;
                    oracle::pairwise(crate::device::PairwiseKind::Mul, &a, &b)
                }
                InstructionKind::Mean => {
                    let v = oracle::reduce(crate::device::ReduceKind::Mean, &a);
                    Tensor::new(TensorShape::new(1, 1)?, vec![v])
                }
                InstructionKind::Max => {
                    let v = oracle::reduce(crate::device::ReduceKind::Max, &a);
                    Tensor::new(TensorShape::new(1, 1)?, vec![v])
                }
                InstructionKind::Tanh => {
                    Ok(oracle::activation(crate::device::ActivationKind::Tanh, &a))
                }
                InstructionKind::Relu => {
                    Ok(oracle::activation(crate::device::ActivationKind::Relu, &a))
                }
                InstructionKind::Crop => match step.params {
                    InstrParams::Window {
                        row0,
                        col0,
                        rows,
                        cols,
                    } => oracle::crop(&a, row0, col0, rows, cols),
                    _ => Err(Error::invalid_input("crop requires a window")),
                },
                InstructionKind::Ext => match step.params {
                    InstrParams::Target { rows, cols } => oracle::ext(&a, rows, cols),
                    _ => Err(Error::invalid_input("ext requires a target shape")),
                },
            }
        }
        StepKind::MatmulConv { s } => {
            let a = materialize_tile(inputs, &step.operands[0])?;
            let b = materialize_tile(inputs, &step.operands[1])?;
            let stacked = stack_rows(&a, s);
            let mut out = Tensor::zeros(a.rows(), b.cols())?;
            for col in 0..b.cols() {
                let kernel = column_kernel(&b, col, s);
                let column = oracle::conv2d(&stacked, &kernel, (s, s))?;
                for r in 0..a.rows() {
                    out.set(r, col, column.get(r, 0));
                }
            }
            Ok(out)
        }
        StepKind::MatmulRows => {
            let a = materialize_tile(inputs, &step.operands[0])?;
            let b = materialize_tile(inputs, &step.operands[1])?;
            let mut out = Tensor::zeros(a.rows(), b.cols())?;
            for r in 0..a.rows() {
                let row = Tensor::new(TensorShape::new(1, a.cols())?, a.row(r).to_vec())?;
                let prod = oracle::gemm(&row, &b)?;
                for c in 0..b.cols() {
                    out.set(r, c, prod.get(0, c));
                }
            }
            Ok(out)
        }
    }
}

/// Replay a whole program in real arithmetic: per-step oracle execution plus
/// the host aggregation plan. Equals the whole-operation oracle up to
/// floating-point reassociation.
pub fn replay_program<T: Scalar>(
    program: &InstructionProgram,
    inputs: &[&Tensor<T>],
) -> Result<Tensor<T>> {
    let mut agg = Aggregator::new(program)?;
    for step in &program.steps {
        let result = replay_step(step, inputs)?;
        agg.add(step, &result)?;
    }
    agg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceProfile;
    use crate::quant::QuantParams;
    use crate::HostTensor;

    fn unit_params() -> QuantParams {
        QuantParams::for_range(0.0, 1.0)
    }

    fn lower_plain(op: OpKind, shapes: &[TensorShape]) -> InstructionProgram {
        lower(
            op,
            shapes,
            &DeviceProfile::default(),
            vec![unit_params(); 2],
            unit_params(),
        )
        .unwrap()
    }

    fn shape(r: usize, c: usize) -> TensorShape {
        TensorShape::new(r, c).unwrap()
    }

    #[test]
    fn pairwise_256_gives_four_steps() {
        let p = lower_plain(OpKind::Add, &[shape(256, 256), shape(256, 256)]);
        assert_eq!(p.instruction_count(), 4);
        assert_eq!(p.aggregation, Aggregation::Assemble);
    }

    #[test]
    fn mean_128_gives_four_reduce_steps() {
        let p = lower_plain(OpKind::Mean, &[shape(128, 128)]);
        assert_eq!(p.instruction_count(), 4);
        assert!(matches!(p.aggregation, Aggregation::MeanOfParts { .. }));
        assert!(p
            .steps
            .iter()
            .all(|s| s.operands[0].pad_rows == 64 && s.operands[0].pad_cols == 64));
    }

    #[test]
    fn matmul_256_gives_eight_block_steps() {
        let p = lower_plain(OpKind::Matmul, &[shape(256, 256), shape(256, 256)]);
        assert_eq!(p.instruction_count(), 8);
        assert_eq!(p.aggregation, Aggregation::SumPartials);
    }

    #[test]
    fn instruction_count_scaling() {
        let small = lower_plain(OpKind::Add, &[shape(256, 256), shape(256, 256)]);
        let big = lower_plain(OpKind::Add, &[shape(512, 512), shape(512, 512)]);
        assert_eq!(big.instruction_count(), 4 * small.instruction_count());
        let gs = lower_plain(OpKind::Matmul, &[shape(256, 256), shape(256, 256)]);
        let gb = lower_plain(OpKind::Matmul, &[shape(512, 512), shape(512, 512)]);
        assert_eq!(gb.instruction_count(), 8 * gs.instruction_count());
    }

    #[test]
    fn pairwise_tiles_cover_input_once() {
        for (rows, cols) in [(1, 1), (130, 5), (256, 300), (127, 129)] {
            let p = lower_plain(OpKind::Add, &[shape(rows, cols), shape(rows, cols)]);
            let mut seen = vec![0u8; rows * cols];
            for s in &p.steps {
                let t = &s.operands[0];
                for r in t.row0..t.row0 + t.rows {
                    for c in t.col0..t.col0 + t.cols {
                        seen[r * cols + c] += 1;
                    }
                }
            }
            assert!(seen.iter().all(|&n| n == 1), "{rows}x{cols}");
        }
    }

    #[test]
    fn matmul_blocks_cover_the_blocked_multiset() {
        // Every A element appears in exactly ceil(K/T) steps, every B element
        // in exactly ceil(M/T).
        let (m, n, k) = (200, 300, 130);
        let p = lower_plain(OpKind::Matmul, &[shape(m, n), shape(n, k)]);
        let mut a_seen = vec![0u32; m * n];
        let mut b_seen = vec![0u32; n * k];
        for s in &p.steps {
            let a = &s.operands[0];
            for r in a.row0..a.row0 + a.rows {
                for c in a.col0..a.col0 + a.cols {
                    a_seen[r * n + c] += 1;
                }
            }
            let b = &s.operands[1];
            for r in b.row0..b.row0 + b.rows {
                for c in b.col0..b.col0 + b.cols {
                    b_seen[r * k + c] += 1;
                }
            }
        }
        let kb = k.div_ceil(128) as u32;
        let mb = m.div_ceil(128) as u32;
        assert!(a_seen.iter().all(|&v| v == kb));
        assert!(b_seen.iter().all(|&v| v == mb));
    }

    #[test]
    fn stacked_construction_matches_direct_gemm() {
        for (m, n, k, seed) in [(3, 5, 4, 1), (1, 1, 1, 2), (7, 16, 9, 3), (20, 40, 31, 4)] {
            let a = HostTensor::random_uniform(m, n, -3.0, 3.0, seed).unwrap();
            let b = HostTensor::random_uniform(n, k, -3.0, 3.0, seed + 100).unwrap();
            let p = lower_opt(
                OpKind::Matmul,
                &[a.shape(), b.shape()],
                &DeviceProfile::default(),
                vec![unit_params(); 2],
                unit_params(),
                LowerOptions {
                    force_conv_matmul: true,
                },
            )
            .unwrap();
            let replayed = replay_program(&p, &[&a, &b]).unwrap();
            let direct = oracle::gemm(&a, &b).unwrap();
            for (x, y) in replayed.data().iter().zip(direct.data()) {
                assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0), "{m}x{n}x{k}");
            }
        }
    }

    #[test]
    fn replay_matches_oracle_on_big_tiled_ops() {
        let a = HostTensor::random_uniform(300, 259, -2.0, 2.0, 7).unwrap();
        let b = HostTensor::random_uniform(300, 259, -2.0, 2.0, 8).unwrap();
        for op in [OpKind::Add, OpKind::Sub, OpKind::Mul] {
            let p = lower_plain(op, &[a.shape(), b.shape()]);
            let replayed = replay_program(&p, &[&a, &b]).unwrap();
            let direct = replay_step(
                &ProgramStep {
                    kind: StepKind::Single(op.scale_kind()),
                    params: InstrParams::None,
                    operands: vec![TileRef::full(0, a.shape()), TileRef::full(1, b.shape())],
                    dest: DestSlot::Grid {
                        row0: 0,
                        col0: 0,
                        rows: 300,
                        cols: 259,
                    },
                },
                &[&a, &b],
            )
            .unwrap();
            assert_eq!(replayed, direct);
        }
        // Mean over an awkward shape: padding must not bias the result.
        let t = HostTensor::random_uniform(100, 70, -5.0, 5.0, 9).unwrap();
        let p = lower_plain(OpKind::Mean, &[t.shape()]);
        let replayed = replay_program(&p, &[&t]).unwrap();
        let direct = oracle::reduce(crate::device::ReduceKind::Mean, &t);
        assert!((replayed.get(0, 0) - direct).abs() < 1e-12);
        // Max over all-negative values: unpadded tiles keep it honest.
        let neg = t.map(|v| -v.abs() - 1.0);
        let p = lower_plain(OpKind::Max, &[neg.shape()]);
        let replayed = replay_program(&p, &[&neg]).unwrap();
        let direct = oracle::reduce(crate::device::ReduceKind::Max, &neg);
        assert_eq!(replayed.get(0, 0), direct);
    }

    #[test]
    fn fully_connected_partials_sum_to_gemm() {
        let v = HostTensor::random_uniform(1, 300, 0.0, 1.0, 11).unwrap();
        let m = HostTensor::random_uniform(300, 200, 0.0, 1.0, 12).unwrap();
        let p = lower_plain(OpKind::FullyConnected, &[v.shape(), m.shape()]);
        assert_eq!(p.instruction_count(), 3 * 2);
        let replayed = replay_program(&p, &[&v, &m]).unwrap();
        let direct = oracle::gemm(&v, &m).unwrap();
        for (x, y) in replayed.data().iter().zip(direct.data()) {
            assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn conv_band_split_matches_whole_conv() {
        let input = HostTensor::random_uniform(64, 32, -1.0, 1.0, 13).unwrap();
        let kernel = HostTensor::random_uniform(3, 3, -1.0, 1.0, 14).unwrap();
        let mut tiny = DeviceProfile::default();
        tiny.onchip_memory_bytes = 700; // forces banding
        let p = lower(
            OpKind::Conv2d { stride: (1, 1) },
            &[input.shape(), kernel.shape()],
            &tiny,
            vec![unit_params(); 2],
            unit_params(),
        )
        .unwrap();
        assert!(p.instruction_count() > 1);
        let replayed = replay_program(&p, &[&input, &kernel]).unwrap();
        let direct = oracle::conv2d(&input, &kernel, (1, 1)).unwrap();
        for (x, y) in replayed.data().iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_conv_band_split_matches_whole_conv() {
        let input = HostTensor::random_uniform(90, 12, -1.0, 1.0, 15).unwrap();
        let kernel = HostTensor::random_uniform(4, 4, -1.0, 1.0, 16).unwrap();
        let mut tiny = DeviceProfile::default();
        tiny.onchip_memory_bytes = 400;
        let p = lower(
            OpKind::Conv2d { stride: (3, 2) },
            &[input.shape(), kernel.shape()],
            &tiny,
            vec![unit_params(); 2],
            unit_params(),
        )
        .unwrap();
        assert!(p.instruction_count() > 1);
        let replayed = replay_program(&p, &[&input, &kernel]).unwrap();
        let direct = oracle::conv2d(&input, &kernel, (3, 2)).unwrap();
        for (x, y) in replayed.data().iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rows_realization_below_inner_limit() {
        let a = HostTensor::random_uniform(10, 3, -1.0, 1.0, 17).unwrap();
        let b = HostTensor::random_uniform(3, 6, -1.0, 1.0, 18).unwrap();
        let p = lower_plain(OpKind::Matmul, &[a.shape(), b.shape()]);
        assert!(matches!(p.steps[0].kind, StepKind::MatmulRows));
        assert_eq!(p.steps[0].micro_kind(), InstructionKind::FullyConnected);
        let replayed = replay_program(&p, &[&a, &b]).unwrap();
        let direct = oracle::gemm(&a, &b).unwrap();
        for (x, y) in replayed.data().iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unsupported_shapes_error() {
        assert!(lower(
            OpKind::Add,
            &[shape(2, 2), shape(2, 3)],
            &DeviceProfile::default(),
            vec![unit_params(); 2],
            unit_params(),
        )
        .is_err());
        assert!(lower(
            OpKind::Crop {
                row0: 1,
                col0: 1,
                rows: 3,
                cols: 3
            },
            &[shape(3, 3)],
            &DeviceProfile::default(),
            vec![unit_params()],
            unit_params(),
        )
        .is_err());
    }

    #[test]
    fn gemm_plan_facts() {
        let p = gemm_plan(128, 64);
        assert_eq!(p.block_edge, 12);
        assert_eq!(p.kernel_count, 64);
        assert!(p.block_edge * p.block_edge >= p.inner);
        assert_eq!(block_edge(1), 1);
        assert_eq!(block_edge(16), 4);
        assert_eq!(block_edge(17), 5);
    }
}
