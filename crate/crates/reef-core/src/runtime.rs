//! The host API and the two-level scheduler.
//!
//! Applications describe work as tasks (closures enqueued with
//! [`Runtime::enqueue`]) whose operator invocations serialize within the
//! task. Each invocation is lowered into instruction-queue entries that the
//! scheduler assigns across the emulated devices: entries that share the
//! same reused input, quantization flags, and task id are pinned to one
//! device so the loaded block is reused; everything else goes
//! first-come-first-serve to the device with the earliest simulated clock
//! (ties broken by lowest index).
//!
//! Execution is deterministic: tasks run in enqueue order on the calling
//! thread when [`Runtime::sync`] or [`Runtime::wait`] drives them, and
//! device assignment depends only on simulated clocks. Parallelism shows up
//! in the simulated makespan, which an execution trace can replay for any
//! device count ([`replay_makespan`]).

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::KvMap;
use crate::device::{
    BlockId, DeviceProfile, DeviceState, InstrParams, Instruction, InstructionKind,
};
use crate::error::{Error, Result};
use crate::lower::{
    self, Aggregator, InstructionProgram, OpKind, ProgramStep, QuantFlags, StepKind, TileRef,
};
use crate::quant::{dequantize, quantize, scale_factor, QuantParams, QuantizedBlock};
use crate::tensor::{range_stats_auto, RangeStats, TensorShape};
use crate::HostTensor;

/// Whether invocations run on the emulated devices or replay the lowered
/// program with the float64 oracle (no quantization anywhere).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    Quantized,
    OracleReplay,
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub devices: usize,
    pub profile: DeviceProfile,
    /// Fail a task on any device saturation or accumulator overflow.
    pub strict_saturation: bool,
    pub mode: ExecMode,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            devices: 1,
            profile: DeviceProfile::default(),
            strict_saturation: false,
            mode: ExecMode::Quantized,
        }
    }
}

impl RuntimeConfig {
    /// Read `devices`, `strict_saturation`, `mode` and the profile keys
    /// (`memory_bytes`, `transfer_ms_per_mb`, `ops.<instruction>`, ...) from
    /// one key-value map.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut cfg = RuntimeConfig::default();
        cfg.apply_kv(kv)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(d) = kv.get_usize("devices")? {
            if d == 0 {
                return Err(Error::Config("devices must be >= 1".into()));
            }
            self.devices = d;
        }
        if let Some(b) = kv.get_bool("strict_saturation")? {
            self.strict_saturation = b;
        }
        if let Some(m) = kv.get("mode") {
            self.mode = match m {
                "quantized" => ExecMode::Quantized,
                "oracle-replay" => ExecMode::OracleReplay,
                other => return Err(Error::Config(format!("unknown mode `{other}`"))),
            };
        }
        self.profile.apply_kv(kv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskHandle {
    pub task_id: u64,
}

/// Shape descriptor returned by [`Runtime::alloc_dimension`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimensionDesc {
    pub shape: TensorShape,
}

pub type BufferId = u64;

/// One scheduled instruction-queue entry, as recorded in the execution
/// trace. `blocks` lists every operand block with its byte size so a replay
/// can recompute transfer costs for any device count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub task_id: u64,
    pub op: String,
    pub micro_kind: InstructionKind,
    pub micro_ops: usize,
    pub exec_us: f64,
    pub affinity: u64,
    pub device: usize,
    pub blocks: Vec<(BlockId, usize)>,
}

/// Per-device statistics accumulated over a runtime's lifetime.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DeviceStats {
    pub clock_us: f64,
    pub exec_counts: BTreeMap<InstructionKind, u64>,
    pub load_counts: BTreeMap<BlockId, u64>,
    pub saturation_events: u64,
    pub overflow_events: u64,
}

#[derive(Debug, Clone)]
struct Buffer {
    shape: TensorShape,
    data: Option<HostTensor>,
    written_by: Option<u64>,
}

type TaskClosure = Box<dyn for<'a> FnOnce(&TaskCtx<'a>) -> Result<()> + Send>;

struct Task {
    state: TaskState,
    reason: Option<String>,
    closure: Option<TaskClosure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum BlockLayout {
    Plain,
    Stacked { s: usize },
    Kernel { s: usize, col: usize },
    Row { row: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct BlockKey {
    buffer: BufferId,
    tile: TileRef,
    layout: BlockLayout,
    scale_bits: u64,
    zero_point: u8,
}

struct Inner {
    cfg: RuntimeConfig,
    devices: Vec<DeviceState>,
    buffers: BTreeMap<BufferId, Buffer>,
    next_buffer: BufferId,
    tasks: BTreeMap<u64, Task>,
    order: Vec<u64>,
    next_task: u64,
    block_ids: HashMap<BlockKey, BlockId>,
    next_block: BlockId,
    affinity: HashMap<(u64, u64, BlockId), usize>,
    trace: Vec<TraceEntry>,
    clamp_events: u64,
}

thread_local! {
    static CURRENT_TASK: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Context handed to a task closure; operator invocations go through it.
pub struct TaskCtx<'a> {
    runtime: &'a Runtime,
    pub task_id: u64,
}

impl TaskCtx<'_> {
    pub fn invoke_operator(
        &self,
        kind: OpKind,
        flags: &QuantFlags,
        inputs: &[BufferId],
        output: BufferId,
    ) -> Result<()> {
        self.runtime.invoke_operator(kind, flags, inputs, output)
    }

    /// The runtime this task runs on, for mid-task buffer management.
    pub fn runtime(&self) -> &Runtime {
        self.runtime
    }
}

/// The multi-device offload runtime. Thread-safe; tasks may be enqueued from
/// any number of threads.
pub struct Runtime {
    inner: Mutex<Inner>,
}

impl Runtime {
    pub fn new(cfg: RuntimeConfig) -> Result<Runtime> {
        if cfg.devices == 0 {
            return Err(Error::invalid_input("device count must be >= 1"));
        }
        let devices = (0..cfg.devices)
            .map(|_| DeviceState::new(cfg.profile.clone(), cfg.strict_saturation))
            .collect();
        Ok(Runtime {
            inner: Mutex::new(Inner {
                cfg,
                devices,
                buffers: BTreeMap::new(),
                next_buffer: 1,
                tasks: BTreeMap::new(),
                order: Vec::new(),
                next_task: 1,
                block_ids: HashMap::new(),
                next_block: 1,
                affinity: HashMap::new(),
                trace: Vec::new(),
                clamp_events: 0,
            }),
        })
    }

    pub fn with_defaults() -> Runtime {
        Runtime::new(RuntimeConfig::default()).expect("default config is valid")
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("runtime lock poisoned")
    }

    pub fn mode(&self) -> ExecMode {
        self.lock().cfg.mode
    }

    pub fn alloc_dimension(&self, rows: usize, cols: usize) -> Result<DimensionDesc> {
        Ok(DimensionDesc {
            shape: TensorShape::new(rows, cols)?,
        })
    }

    /// Register a buffer. `data` must match the dimension descriptor; pass
    /// `None` for an output buffer.
    pub fn create_buffer(
        &self,
        dim: &DimensionDesc,
        data: Option<&HostTensor>,
    ) -> Result<BufferId> {
        if let Some(t) = data {
            if t.shape() != dim.shape {
                return Err(Error::invalid_input(format!(
                    "buffer data shape {} does not match dimension {}",
                    t.shape(),
                    dim.shape
                )));
            }
        }
        let mut inner = self.lock();
        let id = inner.next_buffer;
        inner.next_buffer += 1;
        inner.buffers.insert(
            id,
            Buffer {
                shape: dim.shape,
                data: data.cloned(),
                written_by: None,
            },
        );
        Ok(id)
    }

    pub fn read_buffer(&self, id: BufferId) -> Result<HostTensor> {
        let inner = self.lock();
        let buf = inner
            .buffers
            .get(&id)
            .ok_or_else(|| Error::invalid_input(format!("unknown buffer {id}")))?;
        buf.data.clone().ok_or(Error::UninitializedRead(id))
    }

    /// Enqueue a task. The closure runs when [`Runtime::sync`] or
    /// [`Runtime::wait`] drives the queue; its operator invocations
    /// serialize, while distinct tasks may interleave on the devices.
    pub fn enqueue<F>(&self, f: F) -> TaskHandle
    where
        F: for<'a> FnOnce(&TaskCtx<'a>) -> Result<()> + Send + 'static,
    {
        let mut inner = self.lock();
        let id = inner.next_task;
        inner.next_task += 1;
        inner.tasks.insert(
            id,
            Task {
                state: TaskState::Pending,
                reason: None,
                closure: Some(Box::new(f)),
            },
        );
        inner.order.push(id);
        TaskHandle { task_id: id }
    }

    pub fn task_state(&self, task_id: u64) -> Result<TaskState> {
        let inner = self.lock();
        inner
            .tasks
            .get(&task_id)
            .map(|t| t.state)
            .ok_or(Error::UnknownTask(task_id))
    }

    fn next_pending(&self, upto: Option<u64>) -> Option<(u64, TaskClosure)> {
        let mut inner = self.lock();
        let candidate = inner
            .order
            .iter()
            .copied()
            .find(|id| inner.tasks[id].state == TaskState::Pending);
        let id = candidate?;
        if let Some(limit) = upto {
            if id > limit {
                return None;
            }
        }
        let task = inner.tasks.get_mut(&id).expect("task exists");
        task.state = TaskState::Running;
        let closure = task.closure.take().expect("pending task has closure");
        Some((id, closure))
    }

    fn drive(&self, upto: Option<u64>) {
        while let Some((id, closure)) = self.next_pending(upto) {
            let ctx = TaskCtx {
                runtime: self,
                task_id: id,
            };
            // Tasks may enqueue and wait on sub-tasks; restore the caller's
            // task context afterwards.
            let prev = CURRENT_TASK.with(|c| c.replace(Some(id)));
            let result = closure(&ctx);
            CURRENT_TASK.with(|c| c.set(prev));
            let mut inner = self.lock();
            let task = inner.tasks.get_mut(&id).expect("task exists");
            match result {
                Ok(()) => task.state = TaskState::Done,
                Err(e) => {
                    task.state = TaskState::Failed;
                    task.reason = Some(e.to_string());
                }
            }
        }
    }

    /// Run every enqueued task to completion. Individual task failures are
    /// recorded on their handles; other tasks proceed.
    pub fn sync(&self) -> Result<()> {
        self.drive(None);
        Ok(())
    }

    /// Block until `task_id` completes; surfaces that task's failure.
    pub fn wait(&self, task_id: u64) -> Result<()> {
        {
            let inner = self.lock();
            if !inner.tasks.contains_key(&task_id) {
                return Err(Error::invalid_input(format!("unknown task id {task_id}")));
            }
        }
        self.drive(Some(task_id));
        let inner = self.lock();
        let task = &inner.tasks[&task_id];
        match task.state {
            TaskState::Done => Ok(()),
            TaskState::Failed => Err(Error::TaskFailed {
                task: task_id,
                reason: task.reason.clone().unwrap_or_default(),
            }),
            _ => Err(Error::TaskFailed {
                task: task_id,
                reason: "not driven to completion".into(),
            }),
        }
    }

    /// Invoke a device operator. Must be called from inside a task; blocks
    /// (logically) until the lowered program has executed and the aggregated
    /// result sits in `output`.
    pub fn invoke_operator(
        &self,
        kind: OpKind,
        flags: &QuantFlags,
        inputs: &[BufferId],
        output: BufferId,
    ) -> Result<()> {
        let task_id = CURRENT_TASK
            .with(|c| c.get())
            .ok_or(Error::InvokeOutsideTask)?;
        let mut inner = self.lock();
        inner.execute_op(task_id, kind, flags, inputs, output)
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.lock().trace.clone()
    }

    pub fn device_stats(&self) -> Vec<DeviceStats> {
        let inner = self.lock();
        inner
            .devices
            .iter()
            .map(|d| {
                let mut exec_counts: BTreeMap<InstructionKind, u64> = BTreeMap::new();
                for &k in &d.exec_log {
                    *exec_counts.entry(k).or_insert(0) += 1;
                }
                let mut load_counts: BTreeMap<BlockId, u64> = BTreeMap::new();
                for ev in &d.transfer_log {
                    *load_counts.entry(ev.block).or_insert(0) += 1;
                }
                DeviceStats {
                    clock_us: d.clock_us(),
                    exec_counts,
                    load_counts,
                    saturation_events: d.saturation_events,
                    overflow_events: d.overflow_events,
                }
            })
            .collect()
    }

    /// Host-side clamp events observed while quantizing operator inputs.
    pub fn clamp_events(&self) -> u64 {
        self.lock().clamp_events
    }

    pub fn saturation_events(&self) -> u64 {
        let inner = self.lock();
        inner.devices.iter().map(|d| d.saturation_events).sum()
    }

    pub fn overflow_events(&self) -> u64 {
        let inner = self.lock();
        inner.devices.iter().map(|d| d.overflow_events).sum()
    }

    /// Simulated makespan of everything executed so far: the latest device
    /// clock.
    pub fn makespan_us(&self) -> f64 {
        let inner = self.lock();
        inner
            .devices
            .iter()
            .map(|d| d.clock_us())
            .fold(0.0, f64::max)
    }

    pub fn profile(&self) -> DeviceProfile {
        self.lock().cfg.profile.clone()
    }
}

impl Inner {
    fn execute_op(
        &mut self,
        task_id: u64,
        kind: OpKind,
        flags: &QuantFlags,
        inputs: &[BufferId],
        output: BufferId,
    ) -> Result<()> {
        if inputs.len() != kind.arity() {
            return Err(Error::invalid_input(format!(
                "{} expects {} inputs, got {}",
                kind.name(),
                kind.arity(),
                inputs.len()
            )));
        }
        // Gather inputs.
        let mut tensors = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let buf = self
                .buffers
                .get(&id)
                .ok_or_else(|| Error::invalid_input(format!("unknown buffer {id}")))?;
            let data = buf.data.as_ref().ok_or(Error::UninitializedRead(id))?;
            tensors.push(data.clone());
        }
        let shapes: Vec<TensorShape> = tensors.iter().map(|t| t.shape()).collect();

        // Output buffer checks: shape, and the single-pending-writer rule.
        {
            let out_shape = {
                let buf = self
                    .buffers
                    .get(&output)
                    .ok_or_else(|| Error::invalid_input(format!("unknown buffer {output}")))?;
                if let Some(w) = buf.written_by {
                    let writer_active = self
                        .tasks
                        .get(&w)
                        .map(|t| matches!(t.state, TaskState::Pending | TaskState::Running))
                        .unwrap_or(false);
                    if writer_active && w != task_id {
                        return Err(Error::AliasedOutput(output));
                    }
                }
                buf.shape
            };
            let _ = out_shape;
        }

        // Range statistics and quantization parameters.
        let mut stats = Vec::with_capacity(tensors.len());
        for (i, t) in tensors.iter().enumerate() {
            let s = match flags.input_ranges.get(i).copied().flatten() {
                Some((lo, hi)) => RangeStats::new(lo, hi, false)?,
                None => range_stats_auto(t)?,
            };
            stats.push(s);
        }
        let input_params: Vec<QuantParams> = stats.iter().map(QuantParams::for_input).collect();
        let out_params = match flags.output_range {
            Some((lo, hi)) => QuantParams::for_range(lo, hi),
            None => scale_factor(
                kind.scale_kind(),
                &stats[0],
                stats.get(1),
                kind.inner_dim(&shapes).min(self.cfg.profile.arith_tile),
            )?,
        };

        let program = lower::lower(kind, &shapes, &self.cfg.profile, input_params, out_params)?;
        {
            let buf = &self.buffers[&output];
            if buf.shape != program.output_shape {
                return Err(Error::invalid_shape(format!(
                    "output buffer is {}, operation produces {}",
                    buf.shape, program.output_shape
                )));
            }
        }

        let tensor_refs: Vec<&HostTensor> = tensors.iter().collect();
        let result = match self.cfg.mode {
            ExecMode::OracleReplay => {
                for step in &program.steps {
                    self.trace.push(TraceEntry {
                        task_id,
                        op: kind.name().to_string(),
                        micro_kind: step.micro_kind(),
                        micro_ops: step.micro_ops(),
                        exec_us: 0.0,
                        affinity: 0,
                        device: 0,
                        blocks: Vec::new(),
                    });
                }
                lower::replay_program(&program, &tensor_refs)?
            }
            ExecMode::Quantized => {
                self.execute_quantized(task_id, flags, &program, inputs, &tensor_refs)?
            }
        };

        let buf = self.buffers.get_mut(&output).expect("checked above");
        buf.data = Some(result);
        buf.written_by = Some(task_id);
        Ok(())
    }

    fn block_id(&mut self, key: BlockKey) -> BlockId {
        if let Some(&id) = self.block_ids.get(&key) {
            return id;
        }
        let id = self.next_block;
        self.next_block += 1;
        self.block_ids.insert(key, id);
        id
    }

    /// Device with the earliest clock; ties go to the lowest index.
    fn earliest_device(&self) -> usize {
        let mut best = 0;
        let mut best_clock = f64::INFINITY;
        for (i, d) in self.devices.iter().enumerate() {
            if d.clock_us() < best_clock {
                best = i;
                best_clock = d.clock_us();
            }
        }
        best
    }

    fn execute_quantized(
        &mut self,
        task_id: u64,
        flags: &QuantFlags,
        program: &InstructionProgram,
        buffer_ids: &[BufferId],
        tensors: &[&HostTensor],
    ) -> Result<HostTensor> {
        let mut agg = Aggregator::new(program)?;
        // Quantized operand blocks, built once per distinct key.
        let mut block_cache: HashMap<BlockKey, QuantizedBlock> = HashMap::new();
        let flags_fp = flags.fingerprint();

        for step in &program.steps {
            // Materialize this step's operand blocks (ids and data).
            let mut operand_blocks: Vec<(BlockId, QuantizedBlock)> = Vec::new();
            match step.kind {
                StepKind::Single(_) => {
                    for tile in &step.operands {
                        let (id, block) = self.tile_block(
                            &mut block_cache,
                            buffer_ids,
                            tensors,
                            program,
                            tile,
                            BlockLayout::Plain,
                        )?;
                        operand_blocks.push((id, block));
                    }
                }
                StepKind::MatmulConv { s } => {
                    let (id, block) = self.tile_block(
                        &mut block_cache,
                        buffer_ids,
                        tensors,
                        program,
                        &step.operands[0],
                        BlockLayout::Stacked { s },
                    )?;
                    operand_blocks.push((id, block));
                    for col in 0..step.operands[1].cols {
                        let (id, block) = self.tile_block(
                            &mut block_cache,
                            buffer_ids,
                            tensors,
                            program,
                            &step.operands[1],
                            BlockLayout::Kernel { s, col },
                        )?;
                        operand_blocks.push((id, block));
                    }
                }
                StepKind::MatmulRows => {
                    for row in 0..step.operands[0].rows {
                        let (id, block) = self.tile_block(
                            &mut block_cache,
                            buffer_ids,
                            tensors,
                            program,
                            &step.operands[0],
                            BlockLayout::Row { row },
                        )?;
                        operand_blocks.push((id, block));
                    }
                    let (id, block) = self.tile_block(
                        &mut block_cache,
                        buffer_ids,
                        tensors,
                        program,
                        &step.operands[1],
                        BlockLayout::Plain,
                    )?;
                    operand_blocks.push((id, block));
                }
            }

            // Scheduling. Entries with identical inputs, flags, and task id
            // (differing only in output location) pin to one device so the
            // loaded blocks are reused; everything else goes first-come-
            // first-serve to the earliest-clock device.
            let mut input_set = 0u64;
            for (id, _) in &operand_blocks {
                input_set ^= id.wrapping_mul(0x9e3779b97f4a7c15).rotate_left(17);
            }
            let akey = (task_id, flags_fp, input_set);
            let device_idx = match self.affinity.get(&akey) {
                Some(&d) => d,
                None => {
                    let d = self.earliest_device();
                    self.affinity.insert(akey, d);
                    d
                }
            };

            // Load whatever is missing, evicting least-recently-used blocks
            // if the budget requires it.
            let keep: Vec<BlockId> = operand_blocks.iter().map(|(id, _)| *id).collect();
            let mut trace_blocks = Vec::with_capacity(operand_blocks.len());
            for (id, block) in &operand_blocks {
                trace_blocks.push((*id, block.byte_size()));
                let dev = &mut self.devices[device_idx];
                if !dev.contains(*id) {
                    dev.evict_for(block.byte_size(), &keep)?;
                    dev.load(*id, block.clone())?;
                }
            }

            // Run the device micro-ops and collect the dequantized result.
            let clock_before = self.devices[device_idx].clock_us();
            let result = self.run_step(device_idx, step, &operand_blocks, program)?;
            let exec_us = self.devices[device_idx].clock_us() - clock_before;

            self.trace.push(TraceEntry {
                task_id,
                op: program.op.name().to_string(),
                micro_kind: step.micro_kind(),
                micro_ops: step.micro_ops(),
                exec_us,
                affinity: hash_affinity(akey),
                device: device_idx,
                blocks: trace_blocks,
            });

            agg.add(step, &result)?;
        }
        agg.finish()
    }

    /// Build (or fetch from cache) the quantized block for a tile in the
    /// given layout, interning its identity.
    fn tile_block(
        &mut self,
        cache: &mut HashMap<BlockKey, QuantizedBlock>,
        buffer_ids: &[BufferId],
        tensors: &[&HostTensor],
        program: &InstructionProgram,
        tile: &TileRef,
        layout: BlockLayout,
    ) -> Result<(BlockId, QuantizedBlock)> {
        let qp = program.input_params[tile.input];
        let key = BlockKey {
            buffer: buffer_ids[tile.input],
            tile: *tile,
            layout: layout.clone(),
            scale_bits: qp.code_scale.to_bits(),
            zero_point: qp.zero_point,
        };
        if let Some(block) = cache.get(&key) {
            let id = self.block_id(key);
            return Ok((id, block.clone()));
        }
        let rect = lower::materialize_tile(tensors, tile)?;
        let host = match &layout {
            BlockLayout::Plain => rect,
            BlockLayout::Stacked { s } => lower::stack_rows(&rect, *s),
            BlockLayout::Kernel { s, col } => lower::column_kernel(&rect, *col, *s),
            BlockLayout::Row { row } => crate::tensor::Tensor::new(
                TensorShape::new(1, rect.cols())?,
                rect.row(*row).to_vec(),
            )?,
        };
        let q = quantize(&host, &qp);
        self.clamp_events += q.clamped;
        cache.insert(key.clone(), q.block.clone());
        let id = self.block_id(key);
        Ok((id, q.block))
    }

    fn run_step(
        &mut self,
        device_idx: usize,
        step: &ProgramStep,
        operand_blocks: &[(BlockId, QuantizedBlock)],
        program: &InstructionProgram,
    ) -> Result<HostTensor> {
        let dev = &mut self.devices[device_idx];
        match step.kind {
            StepKind::Single(kind) => {
                let out = dev.execute(&Instruction {
                    kind,
                    operands: operand_blocks.iter().map(|(id, _)| *id).collect(),
                    params: step.params,
                    out_params: program.out_params,
                })?;
                Ok(dequantize(&out))
            }
            StepKind::MatmulConv { s } => {
                let stacked = operand_blocks[0].0;
                let rows = step.operands[0].rows;
                let cols = step.operands[1].cols;
                let mut out = HostTensor::zeros(rows, cols)?;
                for col in 0..cols {
                    let kernel = operand_blocks[1 + col].0;
                    let column = dev.execute(&Instruction {
                        kind: InstructionKind::Conv2d,
                        operands: vec![stacked, kernel],
                        params: InstrParams::Stride(s, s),
                        out_params: program.out_params,
                    })?;
                    let column = dequantize(&column);
                    for r in 0..rows {
                        out.set(r, col, column.get(r, 0));
                    }
                }
                Ok(out)
            }
            StepKind::MatmulRows => {
                let rows = step.operands[0].rows;
                let model = operand_blocks[rows].0;
                let cols = step.operands[1].cols;
                let mut out = HostTensor::zeros(rows, cols)?;
                for row in 0..rows {
                    let vector = operand_blocks[row].0;
                    let prod = dev.execute(&Instruction {
                        kind: InstructionKind::FullyConnected,
                        operands: vec![vector, model],
                        params: InstrParams::None,
                        out_params: program.out_params,
                    })?;
                    let prod = dequantize(&prod);
                    for c in 0..cols {
                        out.set(row, c, prod.get(0, c));
                    }
                }
                Ok(out)
            }
        }
    }
}

fn hash_affinity((task, flags, block): (u64, u64, BlockId)) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in [task, flags, block] {
        h ^= v;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Replay a recorded trace against `devices` simulated devices and return
/// the makespan in microseconds. Uses the live scheduler's policy (affinity
/// pinning, then earliest-clock FCFS) and recomputes transfer costs from the
/// operand block list; device memory capacity is not modeled here.
pub fn replay_makespan(trace: &[TraceEntry], devices: usize, profile: &DeviceProfile) -> f64 {
    assert!(devices >= 1);
    let mut clocks = vec![0.0f64; devices];
    let mut loaded: Vec<std::collections::HashSet<BlockId>> =
        vec![std::collections::HashSet::new(); devices];
    let mut pins: HashMap<u64, usize> = HashMap::new();
    for e in trace {
        let dev = *pins.entry(e.affinity).or_insert_with(|| {
            let mut best = 0;
            for i in 1..devices {
                if clocks[i] < clocks[best] {
                    best = i;
                }
            }
            best
        });
        for &(block, bytes) in &e.blocks {
            if loaded[dev].insert(block) {
                clocks[dev] += profile.transfer_us(bytes);
            }
        }
        clocks[dev] += e.exec_us;
    }
    clocks.into_iter().fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mape;
    use crate::oracle;

    fn quantized_runtime(devices: usize) -> Runtime {
        Runtime::new(RuntimeConfig {
            devices,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn alloc_dimension_validates() {
        let rt = Runtime::with_defaults();
        assert!(rt.alloc_dimension(2, 3).is_ok());
        assert!(rt.alloc_dimension(1, 1).is_ok());
        assert!(rt.alloc_dimension(0, 5).is_err());
    }

    #[test]
    fn create_buffer_validates_shape() {
        let rt = Runtime::with_defaults();
        let dim = rt.alloc_dimension(2, 2).unwrap();
        let ok = HostTensor::filled(2, 2, 1.0).unwrap();
        assert!(rt.create_buffer(&dim, Some(&ok)).is_ok());
        let bad = HostTensor::filled(1, 3, 1.0).unwrap();
        assert!(rt.create_buffer(&dim, Some(&bad)).is_err());
        let out = rt.create_buffer(&dim, None).unwrap();
        assert!(matches!(
            rt.read_buffer(out),
            Err(Error::UninitializedRead(_))
        ));
    }

    #[test]
    fn invoke_outside_task_is_an_error() {
        let rt = Runtime::with_defaults();
        let dim = rt.alloc_dimension(2, 2).unwrap();
        let a = rt
            .create_buffer(&dim, Some(&HostTensor::filled(2, 2, 1.0).unwrap()))
            .unwrap();
        let out = rt.create_buffer(&dim, None).unwrap();
        let err = rt.invoke_operator(OpKind::Relu, &QuantFlags::default(), &[a], out);
        assert!(matches!(err, Err(Error::InvokeOutsideTask)));
    }

    #[test]
    fn add_task_matches_oracle_within_quantization() {
        let rt = quantized_runtime(1);
        let a = HostTensor::random_uniform(128, 128, 0.0, 10.0, 1).unwrap();
        let b = HostTensor::random_uniform(128, 128, 0.0, 10.0, 2).unwrap();
        let dim = rt.alloc_dimension(128, 128).unwrap();
        let ba = rt.create_buffer(&dim, Some(&a)).unwrap();
        let bb = rt.create_buffer(&dim, Some(&b)).unwrap();
        let out = rt.create_buffer(&dim, None).unwrap();
        let t = rt.enqueue(move |ctx| {
            ctx.invoke_operator(OpKind::Add, &QuantFlags::default(), &[ba, bb], out)
        });
        rt.wait(t.task_id).unwrap();
        let got = rt.read_buffer(out).unwrap();
        let want = oracle::pairwise(crate::device::PairwiseKind::Add, &a, &b).unwrap();
        // Inputs quantize at step 10/255, output at 20/255.
        let tol = 10.0 / 255.0 + 20.0 / 255.0;
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= tol);
        }
        assert!(mape(&want, &got, 1e-9).unwrap() < 0.02);
    }

    #[test]
    fn intra_task_order_is_serial() {
        let rt = quantized_runtime(2);
        let dim = rt.alloc_dimension(4, 4).unwrap();
        let ones = HostTensor::filled(4, 4, 1.0).unwrap();
        let a = rt.create_buffer(&dim, Some(&ones)).unwrap();
        let mid = rt.create_buffer(&dim, None).unwrap();
        let out = rt.create_buffer(&dim, None).unwrap();
        let flags = QuantFlags::with_all_ranges(-128.0, 127.0);
        let t = rt.enqueue(move |ctx| {
            ctx.invoke_operator(OpKind::Add, &flags, &[a, a], mid)?;
            // Second operator observes the first one's output.
            ctx.invoke_operator(OpKind::Add, &flags, &[mid, mid], out)
        });
        rt.wait(t.task_id).unwrap();
        let got = rt.read_buffer(out).unwrap();
        assert!(got.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn enqueue_returns_distinct_ids_and_sync_completes_all() {
        let rt = quantized_runtime(2);
        let mut ids = Vec::new();
        for _ in 0..100 {
            ids.push(rt.enqueue(|_| Ok(())).task_id);
        }
        ids.dedup();
        assert_eq!(ids.len(), 100);
        rt.sync().unwrap();
        for id in ids {
            assert_eq!(rt.task_state(id).unwrap(), TaskState::Done);
        }
    }

    #[test]
    fn sync_with_empty_queue_is_immediate() {
        let rt = Runtime::with_defaults();
        rt.sync().unwrap();
    }

    #[test]
    fn every_entry_executes_exactly_once() {
        // Three tasks with known step counts: 4 pairwise tiles (128-edge),
        // 16 reduce tiles (64-edge), and 8 matmul blocks. The trace must
        // hold each entry exactly once.
        let rt = quantized_runtime(3);
        let a = HostTensor::random_uniform(256, 256, 0.0, 1.0, 12).unwrap();
        let dim = rt.alloc_dimension(256, 256).unwrap();
        let ba = rt.create_buffer(&dim, Some(&a)).unwrap();
        let bb = rt.create_buffer(&dim, Some(&a)).unwrap();
        let sum = rt.create_buffer(&dim, None).unwrap();
        let one = rt.alloc_dimension(1, 1).unwrap();
        let mean = rt.create_buffer(&one, None).unwrap();
        let prod = rt.create_buffer(&dim, None).unwrap();
        let t1 = rt.enqueue(move |ctx| {
            ctx.invoke_operator(OpKind::Add, &QuantFlags::default(), &[ba, bb], sum)
        });
        let t2 = rt.enqueue(move |ctx| {
            ctx.invoke_operator(OpKind::Mean, &QuantFlags::default(), &[ba], mean)
        });
        let t3 = rt.enqueue(move |ctx| {
            ctx.invoke_operator(OpKind::Matmul, &QuantFlags::default(), &[ba, bb], prod)
        });
        rt.sync().unwrap();
        for t in [t1, t2, t3] {
            assert_eq!(rt.task_state(t.task_id).unwrap(), TaskState::Done);
        }
        let trace = rt.trace();
        assert_eq!(trace.len(), 4 + 16 + 8);
        let mean_entries = trace
            .iter()
            .filter(|e| e.micro_kind == InstructionKind::Mean)
            .count();
        assert_eq!(mean_entries, 16);
        let conv_entries = trace
            .iter()
            .filter(|e| e.micro_kind == InstructionKind::Conv2d)
            .count();
        assert_eq!(conv_entries, 8);
    }

    #[test]
    fn wait_unknown_task_errors() {
        let rt = Runtime::with_defaults();
        assert!(rt.wait(999).is_err());
    }

    #[test]
    fn failed_task_does_not_stop_others() {
        let rt = quantized_runtime(1);
        let dim = rt.alloc_dimension(2, 2).unwrap();
        let a = rt
            .create_buffer(&dim, Some(&HostTensor::filled(2, 2, 1.0).unwrap()))
            .unwrap();
        let out = rt.create_buffer(&dim, None).unwrap();
        let bad = rt.enqueue(move |ctx| {
            // Mismatched arity: two inputs for a one-input operator.
            ctx.invoke_operator(OpKind::Relu, &QuantFlags::default(), &[a, a], out)
        });
        let good = rt.enqueue(move |ctx| {
            ctx.invoke_operator(OpKind::Relu, &QuantFlags::default(), &[a], out)
        });
        rt.sync().unwrap();
        assert_eq!(rt.task_state(bad.task_id).unwrap(), TaskState::Failed);
        assert_eq!(rt.task_state(good.task_id).unwrap(), TaskState::Done);
        assert!(rt.wait(bad.task_id).is_err());
    }

    #[test]
    fn completed_writer_frees_the_buffer_for_later_tasks() {
        // Output buffers are written at task granularity; once the writing
        // task completes, later tasks may reuse the buffer freely.
        let rt = quantized_runtime(1);
        let dim = rt.alloc_dimension(2, 2).unwrap();
        let a = rt
            .create_buffer(&dim, Some(&HostTensor::filled(2, 2, 1.0).unwrap()))
            .unwrap();
        let out = rt.create_buffer(&dim, None).unwrap();
        for _ in 0..3 {
            let t = rt.enqueue(move |ctx| {
                ctx.invoke_operator(OpKind::Relu, &QuantFlags::default(), &[a], out)
            });
            rt.wait(t.task_id).unwrap();
        }
        assert!(rt.read_buffer(out).is_ok());
    }

    #[test]
    fn oracle_replay_mode_is_exact() {
        let rt = Runtime::new(RuntimeConfig {
            mode: ExecMode::OracleReplay,
            ..Default::default()
        })
        .unwrap();
        let a = HostTensor::random_uniform(200, 150, -3.0, 3.0, 5).unwrap();
        let b = HostTensor::random_uniform(150, 130, -3.0, 3.0, 6).unwrap();
        let da = rt.alloc_dimension(200, 150).unwrap();
        let db = rt.alloc_dimension(150, 130).unwrap();
        let dc = rt.alloc_dimension(200, 130).unwrap();
        let ba = rt.create_buffer(&da, Some(&a)).unwrap();
        let bb = rt.create_buffer(&db, Some(&b)).unwrap();
        let out = rt.create_buffer(&dc, None).unwrap();
        let t = rt.enqueue(move |ctx| {
            ctx.invoke_operator(OpKind::Matmul, &QuantFlags::default(), &[ba, bb], out)
        });
        rt.wait(t.task_id).unwrap();
        let got = rt.read_buffer(out).unwrap();
        let want = oracle::gemm(&a, &b).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0));
        }
    }

    #[test]
    fn affinity_pins_same_input_instructions_to_one_device() {
        let rt = quantized_runtime(4);
        // Four operations over the *same* input buffer with different output
        // locations, all in one task: the affinity rule pins them to a
        // single device and the input block is loaded exactly once.
        let a = HostTensor::random_uniform(64, 64, 0.0, 1.0, 7).unwrap();
        let dim = rt.alloc_dimension(64, 64).unwrap();
        let ba = rt.create_buffer(&dim, Some(&a)).unwrap();
        let outs: Vec<BufferId> = (0..4)
            .map(|_| rt.create_buffer(&dim, None).unwrap())
            .collect();
        let t = rt.enqueue(move |ctx| {
            for &out in &outs {
                ctx.invoke_operator(OpKind::Relu, &QuantFlags::default(), &[ba], out)?;
            }
            Ok(())
        });
        rt.wait(t.task_id).unwrap();
        let trace = rt.trace();
        assert_eq!(trace.len(), 4);
        let dev = trace[0].device;
        assert!(trace.iter().all(|e| e.device == dev));
        let stats = rt.device_stats();
        let loads: u64 = stats.iter().flat_map(|s| s.load_counts.values()).sum();
        assert_eq!(loads, 1, "shared input must be loaded exactly once");
    }

    #[test]
    fn per_device_loads_are_deduplicated() {
        let rt = quantized_runtime(4);
        // Fully-connected tiles share the vector tile across column blocks;
        // wherever steps land, no device loads a block twice.
        let v = HostTensor::random_uniform(1, 128, 0.0, 1.0, 7).unwrap();
        let m = HostTensor::random_uniform(128, 512, 0.0, 1.0, 8).unwrap();
        let dv = rt.alloc_dimension(1, 128).unwrap();
        let dm = rt.alloc_dimension(128, 512).unwrap();
        let dout = rt.alloc_dimension(1, 512).unwrap();
        let bv = rt.create_buffer(&dv, Some(&v)).unwrap();
        let bm = rt.create_buffer(&dm, Some(&m)).unwrap();
        let out = rt.create_buffer(&dout, None).unwrap();
        let t = rt.enqueue(move |ctx| {
            ctx.invoke_operator(
                OpKind::FullyConnected,
                &QuantFlags::default(),
                &[bv, bm],
                out,
            )
        });
        rt.wait(t.task_id).unwrap();
        for s in rt.device_stats() {
            for (&block, &count) in &s.load_counts {
                assert_eq!(count, 1, "block {block} loaded {count} times on one device");
            }
        }
    }

    #[test]
    fn fcfs_spreads_independent_steps() {
        let rt = quantized_runtime(4);
        let a = HostTensor::random_uniform(512, 512, 0.0, 1.0, 9).unwrap();
        let dim = rt.alloc_dimension(512, 512).unwrap();
        let ba = rt.create_buffer(&dim, Some(&a)).unwrap();
        let out = rt.create_buffer(&dim, None).unwrap();
        let t = rt.enqueue(move |ctx| {
            ctx.invoke_operator(OpKind::Relu, &QuantFlags::default(), &[ba], out)
        });
        rt.wait(t.task_id).unwrap();
        // 16 tiles over 4 devices: each runs 4.
        let trace = rt.trace();
        assert_eq!(trace.len(), 16);
        let mut per_dev = [0usize; 4];
        for e in &trace {
            per_dev[e.device] += 1;
        }
        assert_eq!(per_dev, [4, 4, 4, 4]);
    }

    #[test]
    fn makespan_replay_matches_live_run() {
        for devices in [1usize, 2, 4] {
            let rt = quantized_runtime(devices);
            let a = HostTensor::random_uniform(512, 512, 0.0, 1.0, 10).unwrap();
            let dim = rt.alloc_dimension(512, 512).unwrap();
            let ba = rt.create_buffer(&dim, Some(&a)).unwrap();
            let out = rt.create_buffer(&dim, None).unwrap();
            let t = rt.enqueue(move |ctx| {
                ctx.invoke_operator(OpKind::Tanh, &QuantFlags::default(), &[ba], out)
            });
            rt.wait(t.task_id).unwrap();
            let live = rt.makespan_us();
            let replayed = replay_makespan(&rt.trace(), devices, &rt.profile());
            assert!(
                (live - replayed).abs() < 1e-6,
                "devices={devices} live={live} replay={replayed}"
            );
        }
    }

    #[test]
    fn near_linear_scaling_for_independent_instructions() {
        let rt = quantized_runtime(1);
        // 64 independent equal-cost tiles.
        let a = HostTensor::random_uniform(1024, 1024, 0.0, 1.0, 11).unwrap();
        let dim = rt.alloc_dimension(1024, 1024).unwrap();
        let ba = rt.create_buffer(&dim, Some(&a)).unwrap();
        let out = rt.create_buffer(&dim, None).unwrap();
        let t = rt.enqueue(move |ctx| {
            ctx.invoke_operator(OpKind::Relu, &QuantFlags::default(), &[ba], out)
        });
        rt.wait(t.task_id).unwrap();
        let trace = rt.trace();
        let profile = rt.profile();
        let m1 = replay_makespan(&trace, 1, &profile);
        for d in [2usize, 4, 8] {
            let md = replay_makespan(&trace, d, &profile);
            assert!(m1 / md >= 0.9 * d as f64, "speedup {} at d={d}", m1 / md);
        }
    }

    #[test]
    fn strict_mode_fails_task_on_saturation() {
        let rt = Runtime::new(RuntimeConfig {
            strict_saturation: true,
            ..Default::default()
        })
        .unwrap();
        let a = HostTensor::filled(4, 4, 100.0).unwrap();
        let dim = rt.alloc_dimension(4, 4).unwrap();
        let ba = rt.create_buffer(&dim, Some(&a)).unwrap();
        let out = rt.create_buffer(&dim, None).unwrap();
        // Lie about the output range so the requantization saturates.
        let flags = QuantFlags {
            output_range: Some((0.0, 10.0)),
            ..Default::default()
        };
        let t = rt.enqueue(move |ctx| ctx.invoke_operator(OpKind::Relu, &flags, &[ba], out));
        assert!(rt.wait(t.task_id).is_err());
        assert_eq!(rt.task_state(t.task_id).unwrap(), TaskState::Failed);
    }

    #[test]
    fn config_from_kv() {
        let kv = KvMap::parse(
            "devices = 8\nstrict_saturation = true\nmode = oracle-replay\nops.mean = 100\n",
        )
        .unwrap();
        let cfg = RuntimeConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.devices, 8);
        assert!(cfg.strict_saturation);
        assert_eq!(cfg.mode, ExecMode::OracleReplay);
        assert_eq!(cfg.profile.ops(InstructionKind::Mean), 100.0);
    }
}
