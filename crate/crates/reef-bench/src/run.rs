//! End-to-end application runs: execute a kernel, compare against its
//! float64 reference, and collect accuracy plus simulated-performance data.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use reef_core::error::{Error, Result};
use reef_core::kernels::{
    backprop, backprop_reference, blackscholes, blackscholes_reference, gaussian,
    gaussian_reference, generate_options, hotspot3d, hotspot3d_reference, inputs, lud,
    lud_reference, pagerank, pagerank_reference, tpu_gemm, BackpropNet,
};
use reef_core::lower::QuantFlags;
use reef_core::metrics::ErrorReport;
use reef_core::oracle;
use reef_core::runtime::{replay_makespan, ExecMode, Runtime, RuntimeConfig};
use reef_core::tensor::TensorShape;
use reef_core::HostTensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const PAGERANK_ITERATIONS: usize = 8;
pub const HOTSPOT_STEPS: usize = 4;
pub const BACKPROP_OUTPUTS: usize = 16;
pub const BACKPROP_BATCH: usize = 2;
pub const BACKPROP_RATE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum App {
    Gemm,
    Pagerank,
    Hotspot3d,
    Lud,
    Gaussian,
    Backprop,
    Blackscholes,
}

impl App {
    pub const ALL: [App; 7] = [
        App::Gemm,
        App::Pagerank,
        App::Hotspot3d,
        App::Lud,
        App::Gaussian,
        App::Backprop,
        App::Blackscholes,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            App::Gemm => "gemm",
            App::Pagerank => "pagerank",
            App::Hotspot3d => "hotspot3d",
            App::Lud => "lud",
            App::Gaussian => "gaussian",
            App::Backprop => "backprop",
            App::Blackscholes => "blackscholes",
        }
    }

    /// Default input value range, where the app takes one.
    pub fn default_range(&self) -> (f64, f64) {
        match self {
            App::Gemm => (0.0, 128.0),
            App::Pagerank => (0.0, 1.0),
            App::Hotspot3d => (320.0, 340.0),
            // Integer grids; the generators own the actual bounds.
            App::Lud | App::Gaussian => (-128.0, 127.0),
            App::Backprop => (-1.0, 1.0),
            // The option generator owns its parameter distribution.
            App::Blackscholes => (0.0, 0.0),
        }
    }
}

impl FromStr for App {
    type Err = Error;

    fn from_str(s: &str) -> Result<App> {
        App::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid_input(format!("unknown app `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub app: App,
    pub size: usize,
    pub range: Option<(f64, f64)>,
    pub seed: u64,
    pub devices: usize,
    pub mode: ExecMode,
    pub config: RuntimeConfig,
}

impl RunSpec {
    pub fn new(app: App, size: usize) -> RunSpec {
        RunSpec {
            app,
            size,
            range: None,
            seed: reef_core::DEFAULT_SEED,
            devices: 1,
            mode: ExecMode::Quantized,
            config: RuntimeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub app: String,
    pub size: usize,
    pub value_range: (f64, f64),
    pub seed: u64,
    pub mode: String,
    pub devices: usize,
    pub mape: f64,
    /// RMSE divided by the reference output's (max - min); the normalizer is
    /// this project's convention and changes absolute numbers.
    pub rmse_normalized: f64,
    pub max_abs_error: f64,
    pub compared_values: usize,
    /// Instruction-queue entries by device instruction kind.
    pub instruction_counts: BTreeMap<String, u64>,
    /// Device instructions actually executed, by kind.
    pub device_op_counts: BTreeMap<String, u64>,
    /// Simulated makespan replay per device count, microseconds.
    pub makespans_us: Vec<(usize, f64)>,
    pub saturation_events: u64,
    pub overflow_events: u64,
    pub clamp_events: u64,
}

fn flatten(parts: &[&HostTensor]) -> Result<HostTensor> {
    let total: usize = parts.iter().map(|t| t.len()).sum();
    let mut data = Vec::with_capacity(total);
    for t in parts {
        data.extend_from_slice(t.data());
    }
    HostTensor::new(TensorShape::new(1, total)?, data)
}

/// Execute the app under the given runtime and return its flattened output.
fn execute(rt: &Runtime, spec: &RunSpec) -> Result<HostTensor> {
    let n = spec.size;
    let seed = spec.seed;
    let (lo, hi) = spec.range.unwrap_or_else(|| spec.app.default_range());
    match spec.app {
        App::Gemm => {
            let a = HostTensor::random_uniform(n, n, lo, hi, seed)?;
            let b = HostTensor::random_uniform(n, n, lo, hi, seed ^ 0xa5a5)?;
            let c = tpu_gemm(rt, &a, &b, &QuantFlags::default())?;
            flatten(&[&c])
        }
        App::Pagerank => {
            let a = HostTensor::random_uniform(n, n, lo, hi, seed)?;
            let ranks = pagerank(rt, &a, PAGERANK_ITERATIONS)?;
            flatten(&[&ranks])
        }
        App::Hotspot3d => {
            let grid = HostTensor::random_uniform(n, n, lo, hi, seed)?;
            let power = HostTensor::random_uniform(n, n, 0.0, 1.0, seed ^ 0x9090)?;
            let out = hotspot3d(rt, &grid, &power, HOTSPOT_STEPS)?;
            flatten(&[&out])
        }
        App::Lud => {
            let a = inputs::exact_lu_matrix(n, seed);
            let (l, u) = lud(rt, &a, &QuantFlags::with_all_ranges(-128.0, 127.0))?;
            flatten(&[&l, &u])
        }
        App::Gaussian => {
            let (a, b) = inputs::exact_linear_system(n, seed);
            let x = gaussian(rt, &a, &b, &QuantFlags::with_all_ranges(-128.0, 127.0))?;
            flatten(&[&x])
        }
        App::Backprop => {
            let net = BackpropNet::random(n, n, BACKPROP_OUTPUTS, seed)?;
            let samples = HostTensor::random_uniform(BACKPROP_BATCH, n, lo, hi, seed ^ 0x5c5c)?;
            let targets = HostTensor::random_uniform(
                BACKPROP_BATCH,
                BACKPROP_OUTPUTS,
                0.0,
                1.0,
                seed ^ 0x3c3c,
            )?;
            let stepped = backprop(rt, &net, &samples, &targets, BACKPROP_RATE)?;
            flatten(&[&stepped.w1, &stepped.w2])
        }
        App::Blackscholes => {
            let options = generate_options(n, seed);
            let prices = blackscholes(rt, &options)?;
            flatten(&[&prices])
        }
    }
}

/// The float64 oracle for the same inputs.
fn reference(spec: &RunSpec) -> Result<HostTensor> {
    let n = spec.size;
    let seed = spec.seed;
    let (lo, hi) = spec.range.unwrap_or_else(|| spec.app.default_range());
    match spec.app {
        App::Gemm => {
            let a = HostTensor::random_uniform(n, n, lo, hi, seed)?;
            let b = HostTensor::random_uniform(n, n, lo, hi, seed ^ 0xa5a5)?;
            let c = oracle::gemm(&a, &b)?;
            flatten(&[&c])
        }
        App::Pagerank => {
            let a = HostTensor::random_uniform(n, n, lo, hi, seed)?;
            let ranks = pagerank_reference(&a, PAGERANK_ITERATIONS)?;
            flatten(&[&ranks])
        }
        App::Hotspot3d => {
            let grid = HostTensor::random_uniform(n, n, lo, hi, seed)?;
            let power = HostTensor::random_uniform(n, n, 0.0, 1.0, seed ^ 0x9090)?;
            let out = hotspot3d_reference(&grid, &power, HOTSPOT_STEPS)?;
            flatten(&[&out])
        }
        App::Lud => {
            let a = inputs::exact_lu_matrix(n, seed);
            let (l, u) = lud_reference(&a)?;
            flatten(&[&l, &u])
        }
        App::Gaussian => {
            let (a, b) = inputs::exact_linear_system(n, seed);
            let x = gaussian_reference(&a, &b)?;
            flatten(&[&x])
        }
        App::Backprop => {
            let net = BackpropNet::random(n, n, BACKPROP_OUTPUTS, seed)?;
            let samples = HostTensor::random_uniform(BACKPROP_BATCH, n, lo, hi, seed ^ 0x5c5c)?;
            let targets = HostTensor::random_uniform(
                BACKPROP_BATCH,
                BACKPROP_OUTPUTS,
                0.0,
                1.0,
                seed ^ 0x3c3c,
            )?;
            let stepped = backprop_reference(&net, &samples, &targets, BACKPROP_RATE)?;
            flatten(&[&stepped.w1, &stepped.w2])
        }
        App::Blackscholes => {
            let options = generate_options(n, seed);
            let prices = blackscholes_reference(&options)?;
            flatten(&[&prices])
        }
    }
}

/// Run an application end to end and report accuracy against the oracle,
/// instruction counts, and simulated makespans for every device count up to
/// the requested one.
///
/// In oracle-replay mode both sides go through the same lowering, so the
/// reported error is exactly zero; the mode exists to isolate the rewriting
/// machinery from quantization.
pub fn run_app(spec: &RunSpec) -> Result<RunReport> {
    let mut cfg = spec.config.clone();
    cfg.devices = spec.devices;
    cfg.mode = spec.mode;
    let rt = Runtime::new(cfg)?;
    let got = execute(&rt, spec)?;
    let want = match spec.mode {
        ExecMode::Quantized => reference(spec)?,
        ExecMode::OracleReplay => {
            // Oracle against itself, through the same lowering.
            let mut ref_cfg = spec.config.clone();
            ref_cfg.devices = spec.devices;
            ref_cfg.mode = ExecMode::OracleReplay;
            let ref_rt = Runtime::new(ref_cfg)?;
            execute(&ref_rt, spec)?
        }
    };
    let error = ErrorReport::compare(&want, &got)?;

    let trace = rt.trace();
    let mut instruction_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut device_op_counts: BTreeMap<String, u64> = BTreeMap::new();
    for e in &trace {
        *instruction_counts
            .entry(e.micro_kind.name().to_string())
            .or_insert(0) += 1;
        *device_op_counts
            .entry(e.micro_kind.name().to_string())
            .or_insert(0) += e.micro_ops as u64;
    }
    let profile = rt.profile();
    let makespans_us: Vec<(usize, f64)> = (1..=spec.devices)
        .map(|d| (d, replay_makespan(&trace, d, &profile)))
        .collect();

    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        app: spec.app.name().to_string(),
        size: spec.size,
        value_range: spec.range.unwrap_or_else(|| spec.app.default_range()),
        seed: spec.seed,
        mode: match spec.mode {
            ExecMode::Quantized => "quantized".to_string(),
            ExecMode::OracleReplay => "oracle-replay".to_string(),
        },
        devices: spec.devices,
        mape: error.mape,
        rmse_normalized: error.rmse_normalized,
        max_abs_error: error.max_abs_error,
        compared_values: error.count,
        instruction_counts,
        device_op_counts,
        makespans_us,
        saturation_events: rt.saturation_events(),
        overflow_events: rt.overflow_events(),
        clamp_events: rt.clamp_events(),
    })
}
