//! Software model of one accelerator device: the 8-bit instruction set, an
//! 8 MiB on-chip memory budget, and a simulated-latency clock seeded from
//! measured per-instruction throughput.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::quant::{QuantParams, QuantizedBlock};
use crate::tensor::TensorShape;

pub const MIB: usize = 1 << 20;
pub const DEFAULT_ONCHIP_BYTES: usize = 8 * MIB;
pub const DEFAULT_TRANSFER_MS_PER_MB: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionKind {
    Conv2d,
    FullyConnected,
    Add,
    Sub,
    Mul,
    Crop,
    Ext,
    Mean,
    Max,
    Tanh,
    Relu,
}

impl InstructionKind {
    pub const ALL: [InstructionKind; 11] = [
        InstructionKind::Conv2d,
        InstructionKind::FullyConnected,
        InstructionKind::Add,
        InstructionKind::Sub,
        InstructionKind::Mul,
        InstructionKind::Crop,
        InstructionKind::Ext,
        InstructionKind::Mean,
        InstructionKind::Max,
        InstructionKind::Tanh,
        InstructionKind::Relu,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            InstructionKind::Conv2d => "conv2d",
            InstructionKind::FullyConnected => "fully_connected",
            InstructionKind::Add => "add",
            InstructionKind::Sub => "sub",
            InstructionKind::Mul => "mul",
            InstructionKind::Crop => "crop",
            InstructionKind::Ext => "ext",
            InstructionKind::Mean => "mean",
            InstructionKind::Max => "max",
            InstructionKind::Tanh => "tanh",
            InstructionKind::Relu => "relu",
        }
    }

    pub fn from_name(s: &str) -> Option<InstructionKind> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for InstructionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairwiseKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Tanh,
    Relu,
}

/// Measured characteristics of the device class; drives the simulated clock
/// and the lowering tile sizes. Loadable from a key-value config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub onchip_memory_bytes: usize,
    /// Instructions retired per second, per kind.
    pub ops_per_second: BTreeMap<InstructionKind, f64>,
    pub transfer_ms_per_mb: f64,
    /// Preferred tile edge for arithmetic and pairwise instructions.
    pub arith_tile: usize,
    /// Preferred tile edge for mean/max.
    pub reduce_tile: usize,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        let ops_per_second = [
            (InstructionKind::Conv2d, 10268.80),
            (InstructionKind::FullyConnected, 51924.96),
            (InstructionKind::Sub, 6273.28),
            (InstructionKind::Add, 6203.52),
            (InstructionKind::Mul, 14515.84),
            (InstructionKind::Crop, 4867.96),
            (InstructionKind::Ext, 1604.78),
            (InstructionKind::Mean, 408.54),
            (InstructionKind::Max, 477.08),
            (InstructionKind::Tanh, 3232.31),
            (InstructionKind::Relu, 11194.26),
        ]
        .into_iter()
        .collect();
        DeviceProfile {
            onchip_memory_bytes: DEFAULT_ONCHIP_BYTES,
            ops_per_second,
            transfer_ms_per_mb: DEFAULT_TRANSFER_MS_PER_MB,
            arith_tile: 128,
            reduce_tile: 64,
        }
    }
}

impl DeviceProfile {
    pub fn ops(&self, kind: InstructionKind) -> f64 {
        *self
            .ops_per_second
            .get(&kind)
            .expect("profile covers every instruction kind")
    }

    /// Simulated execution time of one instruction, in microseconds.
    pub fn exec_us(&self, kind: InstructionKind) -> f64 {
        1e6 / self.ops(kind)
    }

    /// Simulated host-to-device transfer time for `bytes`, in microseconds.
    pub fn transfer_us(&self, bytes: usize) -> f64 {
        bytes as f64 / MIB as f64 * self.transfer_ms_per_mb * 1000.0
    }

    /// Apply overrides from a parsed key-value config. Recognized keys:
    /// `memory_bytes`, `transfer_ms_per_mb`, `arith_tile`, `reduce_tile`,
    /// and `ops.<instruction>`.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(v) = kv.get_usize("memory_bytes")? {
            if v == 0 {
                return Err(Error::Config("memory_bytes must be > 0".into()));
            }
            self.onchip_memory_bytes = v;
        }
        if let Some(v) = kv.get_f64("transfer_ms_per_mb")? {
            if v <= 0.0 {
                return Err(Error::Config("transfer_ms_per_mb must be > 0".into()));
            }
            self.transfer_ms_per_mb = v;
        }
        if let Some(v) = kv.get_usize("arith_tile")? {
            self.arith_tile = v.max(1);
        }
        if let Some(v) = kv.get_usize("reduce_tile")? {
            self.reduce_tile = v.max(1);
        }
        for kind in InstructionKind::ALL {
            if let Some(v) = kv.get_f64(&format!("ops.{}", kind.name()))? {
                if v <= 0.0 {
                    return Err(Error::Config(format!("ops.{} must be > 0", kind.name())));
                }
                self.ops_per_second.insert(kind, v);
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut p = DeviceProfile::default();
        p.apply_kv(kv)?;
        Ok(p)
    }
}

pub type BlockId = u64;

/// Kind-specific instruction parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InstrParams {
    None,
    Stride(usize, usize),
    Window {
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    },
    Target {
        rows: usize,
        cols: usize,
    },
}

/// One device instruction over loaded blocks.
#[derive(Debug, Clone)]
pub struct Instruction {
    pub kind: InstructionKind,
    pub operands: Vec<BlockId>,
    pub params: InstrParams,
    /// Quantization of the result block. Ignored by crop/ext, which keep
    /// their operand's scale.
    pub out_params: QuantParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub block: BlockId,
    pub bytes: usize,
}

/// One emulated device. Single-owner: exactly one logical executor mutates it
/// at a time; blocks are immutable once loaded.
#[derive(Debug)]
pub struct DeviceState {
    profile: DeviceProfile,
    strict_saturation: bool,
    blocks: BTreeMap<BlockId, QuantizedBlock>,
    /// Least-recently-used order, oldest first.
    lru: Vec<BlockId>,
    used_bytes: usize,
    clock_us: f64,
    pub transfer_log: Vec<TransferEvent>,
    pub exec_log: Vec<InstructionKind>,
    pub saturation_events: u64,
    pub overflow_events: u64,
}

impl DeviceState {
    pub fn new(profile: DeviceProfile, strict_saturation: bool) -> Self {
        DeviceState {
            profile,
            strict_saturation,
            blocks: BTreeMap::new(),
            lru: Vec::new(),
            used_bytes: 0,
            clock_us: 0.0,
            transfer_log: Vec::new(),
            exec_log: Vec::new(),
            saturation_events: 0,
            overflow_events: 0,
        }
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    pub fn clock_us(&self) -> f64 {
        self.clock_us
    }

    pub fn used_bytes(&self) -> usize {
        self.used_bytes
    }

    pub fn contains(&self, id: BlockId) -> bool {
        self.blocks.contains_key(&id)
    }

    pub fn loaded_block(&self, id: BlockId) -> Option<&QuantizedBlock> {
        self.blocks.get(&id)
    }

    /// Reset the clock and statistics, keeping loaded blocks.
    pub fn reset_clock(&mut self) {
        self.clock_us = 0.0;
    }

    /// Drop all loaded blocks and logs (clock is preserved).
    pub fn clear(&mut self) {
        self.blocks.clear();
        self.lru.clear();
        self.used_bytes = 0;
    }

    /// Load a block. Advances the clock by the transfer time. A load that
    /// would exceed the memory budget fails without mutating anything.
    pub fn load(&mut self, id: BlockId, block: QuantizedBlock) -> Result<()> {
        let bytes = block.byte_size();
        let available = self.profile.onchip_memory_bytes - self.used_bytes;
        if bytes > available {
            return Err(Error::DeviceMemoryFull {
                needed: bytes,
                available,
                capacity: self.profile.onchip_memory_bytes,
            });
        }
        if self.blocks.insert(id, block).is_some() {
            // Replaced an identically-named block: recompute usage.
            self.recount();
        } else {
            self.used_bytes += bytes;
        }
        self.touch(id);
        self.clock_us += self.profile.transfer_us(bytes);
        self.transfer_log.push(TransferEvent { block: id, bytes });
        Ok(())
    }

    pub fn evict(&mut self, id: BlockId) -> Result<()> {
        let block = self.blocks.remove(&id).ok_or(Error::MissingOperand(id))?;
        self.used_bytes -= block.byte_size();
        self.lru.retain(|&b| b != id);
        Ok(())
    }

    /// Evict least-recently-used blocks (skipping `keep`) until `needed`
    /// bytes fit. Fails if that is impossible.
    pub fn evict_for(&mut self, needed: usize, keep: &[BlockId]) -> Result<()> {
        if needed > self.profile.onchip_memory_bytes {
            return Err(Error::DeviceMemoryFull {
                needed,
                available: self.profile.onchip_memory_bytes,
                capacity: self.profile.onchip_memory_bytes,
            });
        }
        while self.profile.onchip_memory_bytes - self.used_bytes < needed {
            let victim = self.lru.iter().copied().find(|b| !keep.contains(b)).ok_or(
                Error::DeviceMemoryFull {
                    needed,
                    available: self.profile.onchip_memory_bytes - self.used_bytes,
                    capacity: self.profile.onchip_memory_bytes,
                },
            )?;
            self.evict(victim)?;
        }
        Ok(())
    }

    fn touch(&mut self, id: BlockId) {
        self.lru.retain(|&b| b != id);
        self.lru.push(id);
    }

    fn recount(&mut self) {
        self.used_bytes = self.blocks.values().map(|b| b.byte_size()).sum();
    }

    fn operand(&self, id: BlockId) -> Result<&QuantizedBlock> {
        self.blocks.get(&id).ok_or(Error::MissingOperand(id))
    }

    /// Execute one instruction, advancing the clock by `1 / OPS[kind]`
    /// seconds. The result is returned to the host; it is not retained in
    /// device memory.
    pub fn execute(&mut self, instr: &Instruction) -> Result<QuantizedBlock> {
        for &id in &instr.operands {
            self.operand(id)?;
        }
        for &id in &instr.operands {
            self.touch(id);
        }
        let out = match instr.kind {
            InstructionKind::Conv2d => self.exec_conv2d(instr)?,
            InstructionKind::FullyConnected => self.exec_fully_connected(instr)?,
            InstructionKind::Add => self.exec_pairwise(PairwiseKind::Add, instr)?,
            InstructionKind::Sub => self.exec_pairwise(PairwiseKind::Sub, instr)?,
            InstructionKind::Mul => self.exec_pairwise(PairwiseKind::Mul, instr)?,
            InstructionKind::Mean => self.exec_reduce(ReduceKind::Mean, instr)?,
            InstructionKind::Max => self.exec_reduce(ReduceKind::Max, instr)?,
            InstructionKind::Tanh => self.exec_activation(ActivationKind::Tanh, instr)?,
            InstructionKind::Relu => self.exec_activation(ActivationKind::Relu, instr)?,
            InstructionKind::Crop => self.exec_crop(instr)?,
            InstructionKind::Ext => self.exec_ext(instr)?,
        };
        self.clock_us += self.profile.exec_us(instr.kind);
        self.exec_log.push(instr.kind);
        Ok(out)
    }

    fn two_operands(&self, instr: &Instruction) -> Result<(&QuantizedBlock, &QuantizedBlock)> {
        if instr.operands.len() != 2 {
            return Err(Error::invalid_input(format!(
                "{} expects 2 operands",
                instr.kind
            )));
        }
        Ok((
            self.operand(instr.operands[0])?,
            self.operand(instr.operands[1])?,
        ))
    }

    fn one_operand(&self, instr: &Instruction) -> Result<&QuantizedBlock> {
        if instr.operands.len() != 1 {
            return Err(Error::invalid_input(format!(
                "{} expects 1 operand",
                instr.kind
            )));
        }
        self.operand(instr.operands[0])
    }

    /// Round-half-away-from-zero requantization with saturation counting.
    fn requant(
        values: impl Iterator<Item = f64>,
        shape: TensorShape,
        qp: &QuantParams,
        saturations: &mut u64,
    ) -> QuantizedBlock {
        let zp = qp.zero_point as f64;
        let codes = values
            .map(|real| {
                let code = (real * qp.code_scale).round() + zp;
                if !(0.0..=255.0).contains(&code) {
                    *saturations += 1;
                }
                code.clamp(0.0, 255.0) as u8
            })
            .collect();
        QuantizedBlock::new(shape, codes, qp.code_scale, qp.zero_point).expect("consistent shape")
    }

    fn check_events(&self, sat_before: u64, ovf_before: u64) -> Result<()> {
        if self.strict_saturation {
            if self.overflow_events > ovf_before {
                return Err(Error::AccumulatorOverflow);
            }
            if self.saturation_events > sat_before {
                return Err(Error::Saturation(self.saturation_events - sat_before));
            }
        }
        Ok(())
    }

    fn exec_conv2d(&mut self, instr: &Instruction) -> Result<QuantizedBlock> {
        let (sx, sy) = match instr.params {
            InstrParams::Stride(sx, sy) => (sx, sy),
            _ => (1, 1),
        };
        if sx == 0 || sy == 0 {
            return Err(Error::invalid_input("stride components must be >= 1"));
        }
        let (input, kernel) = self.two_operands(instr)?;
        if kernel.shape.rows > input.shape.rows || kernel.shape.cols > input.shape.cols {
            return Err(Error::invalid_shape(format!(
                "kernel {} larger than input {}",
                kernel.shape, input.shape
            )));
        }
        let out_shape =
            TensorShape::new(input.shape.rows.div_ceil(sx), input.shape.cols.div_ceil(sy))?;
        let zpa = input.zero_point as i64;
        let zpb = kernel.zero_point as i64;
        let denom = input.scale * kernel.scale;
        let mut overflowed = false;
        let mut reals = Vec::with_capacity(out_shape.len());
        for i in 0..out_shape.rows {
            for j in 0..out_shape.cols {
                // 32-bit signed accumulation over (q_a - zp_a)(q_b - zp_b);
                // out-of-range reads contribute zero.
                let mut acc: i64 = 0;
                for p in 0..kernel.shape.rows {
                    let r = i * sx + p;
                    if r >= input.shape.rows {
                        break;
                    }
                    for q in 0..kernel.shape.cols {
                        let c = j * sy + q;
                        if c >= input.shape.cols {
                            break;
                        }
                        let a = input.code(r, c) as i64 - zpa;
                        let b = kernel.code(p, q) as i64 - zpb;
                        acc += a * b;
                        if acc > i32::MAX as i64 || acc < i32::MIN as i64 {
                            overflowed = true;
                        }
                    }
                }
                reals.push(acc as f64 / denom);
            }
        }
        let (s0, o0) = (self.saturation_events, self.overflow_events);
        if overflowed {
            self.overflow_events += 1;
        }
        let out = Self::requant(
            reals.into_iter(),
            out_shape,
            &instr.out_params,
            &mut self.saturation_events,
        );
        self.check_events(s0, o0)?;
        Ok(out)
    }

    fn exec_fully_connected(&mut self, instr: &Instruction) -> Result<QuantizedBlock> {
        let (vector, model) = self.two_operands(instr)?;
        if vector.shape.rows != 1 {
            return Err(Error::invalid_shape(format!(
                "fully_connected vector must be 1xN, got {}",
                vector.shape
            )));
        }
        if vector.shape.cols != model.shape.rows {
            return Err(Error::invalid_shape(format!(
                "fully_connected inner dimensions disagree: {} vs {}",
                vector.shape, model.shape
            )));
        }
        let n = vector.shape.cols;
        let k = model.shape.cols;
        let zpa = vector.zero_point as i64;
        let zpb = model.zero_point as i64;
        let denom = vector.scale * model.scale;
        let mut overflowed = false;
        let mut reals = Vec::with_capacity(k);
        for col in 0..k {
            let mut acc: i64 = 0;
            for j in 0..n {
                let a = vector.code(0, j) as i64 - zpa;
                let b = model.code(j, col) as i64 - zpb;
                acc += a * b;
                if acc > i32::MAX as i64 || acc < i32::MIN as i64 {
                    overflowed = true;
                }
            }
            reals.push(acc as f64 / denom);
        }
        let (s0, o0) = (self.saturation_events, self.overflow_events);
        if overflowed {
            self.overflow_events += 1;
        }
        let out = Self::requant(
            reals.into_iter(),
            TensorShape::new(1, k)?,
            &instr.out_params,
            &mut self.saturation_events,
        );
        self.check_events(s0, o0)?;
        Ok(out)
    }

    fn exec_pairwise(&mut self, kind: PairwiseKind, instr: &Instruction) -> Result<QuantizedBlock> {
        let (a, b) = self.two_operands(instr)?;
        if a.shape != b.shape {
            return Err(Error::invalid_shape(format!(
                "pairwise over mismatched shapes {} vs {}",
                a.shape, b.shape
            )));
        }
        let shape = a.shape;
        let reals: Vec<f64> = (0..shape.rows)
            .flat_map(|r| (0..shape.cols).map(move |c| (r, c)))
            .map(|(r, c)| {
                let x = a.real(r, c);
                let y = b.real(r, c);
                match kind {
                    PairwiseKind::Add => x + y,
                    PairwiseKind::Sub => x - y,
                    PairwiseKind::Mul => x * y,
                }
            })
            .collect();
        let s0 = self.saturation_events;
        let out = Self::requant(
            reals.into_iter(),
            shape,
            &instr.out_params,
            &mut self.saturation_events,
        );
        self.check_events(s0, self.overflow_events)?;
        Ok(out)
    }

    fn exec_reduce(&mut self, kind: ReduceKind, instr: &Instruction) -> Result<QuantizedBlock> {
        let a = self.one_operand(instr)?;
        let n = a.shape.len();
        let value = match kind {
            ReduceKind::Mean => {
                let mut sum = 0.0;
                for &q in &a.values {
                    sum += (q as f64 - a.zero_point as f64) / a.scale;
                }
                sum / n as f64
            }
            ReduceKind::Max => a
                .values
                .iter()
                .map(|&q| (q as f64 - a.zero_point as f64) / a.scale)
                .fold(f64::NEG_INFINITY, f64::max),
        };
        let s0 = self.saturation_events;
        let out = Self::requant(
            std::iter::once(value),
            TensorShape::new(1, 1)?,
            &instr.out_params,
            &mut self.saturation_events,
        );
        self.check_events(s0, self.overflow_events)?;
        Ok(out)
    }

    fn exec_activation(
        &mut self,
        kind: ActivationKind,
        instr: &Instruction,
    ) -> Result<QuantizedBlock> {
        let a = self.one_operand(instr)?;
        let shape = a.shape;
        let reals: Vec<f64> = a
            .values
            .iter()
            .map(|&q| {
                let x = (q as f64 - a.zero_point as f64) / a.scale;
                match kind {
                    ActivationKind::Tanh => x.tanh(),
                    ActivationKind::Relu => x.max(0.0),
                }
            })
            .collect();
        let s0 = self.saturation_events;
        let out = Self::requant(
            reals.into_iter(),
            shape,
            &instr.out_params,
            &mut self.saturation_events,
        );
        self.check_events(s0, self.overflow_events)?;
        Ok(out)
    }

    /// Crop keeps the operand's codes and scale.
    fn exec_crop(&mut self, instr: &Instruction) -> Result<QuantizedBlock> {
        let (row0, col0, rows, cols) = match instr.params {
            InstrParams::Window {
                row0,
                col0,
                rows,
                cols,
            } => (row0, col0, rows, cols),
            _ => return Err(Error::invalid_input("crop requires a window")),
        };
        let a = self.one_operand(instr)?;
        if row0 + rows > a.shape.rows || col0 + cols > a.shape.cols {
            return Err(Error::invalid_shape(format!(
                "crop window {rows}x{cols}@({row0},{col0}) outside {}",
                a.shape
            )));
        }
        let shape = TensorShape::new(rows, cols)?;
        let mut codes = Vec::with_capacity(shape.len());
        for r in 0..rows {
            for c in 0..cols {
                codes.push(a.code(row0 + r, col0 + c));
            }
        }
        QuantizedBlock::new(shape, codes, a.scale, a.zero_point)
    }

    /// Ext pads with the operand's zero point (real zero), keeping its scale.
    fn exec_ext(&mut self, instr: &Instruction) -> Result<QuantizedBlock> {
        let (rows, cols) = match instr.params {
            InstrParams::Target { rows, cols } => (rows, cols),
            _ => return Err(Error::invalid_input("ext requires a target shape")),
        };
        let a = self.one_operand(instr)?;
        if rows < a.shape.rows || cols < a.shape.cols {
            return Err(Error::invalid_shape(format!(
                "ext target {rows}x{cols} smaller than source {}",
                a.shape
            )));
        }
        let shape = TensorShape::new(rows, cols)?;
        let mut codes = vec![a.zero_point; shape.len()];
        for r in 0..a.shape.rows {
            for c in 0..a.shape.cols {
                codes[r * cols + c] = a.code(r, c);
            }
        }
        QuantizedBlock::new(shape, codes, a.scale, a.zero_point)
    }
}
