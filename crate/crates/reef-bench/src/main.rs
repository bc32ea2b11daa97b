use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use reef_bench::{characterize, run_app, RunSpec};
use reef_core::codec;
use reef_core::config::KvMap;
use reef_core::device::InstructionKind;
use reef_core::runtime::{ExecMode, RuntimeConfig};

#[derive(Parser)]
#[command(
    name = "bench",
    about = "Characterize the emulated accelerator and run application accuracy benchmarks"
)]
struct Cli {
    /// Key-value config file (devices, strict_saturation, memory_bytes,
    /// transfer_ms_per_mb, ops.<instruction>, ...).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure OPS, RPS, and the data-exchange rate of one instruction.
    Characterize(CharacterizeArgs),
    /// Run an application against its float64 oracle and report accuracy.
    Run(RunArgs),
    /// Print the header fields, shapes, scale, and data checksum of a model
    /// blob.
    InspectModel { path: PathBuf },
}

#[derive(Args)]
struct CharacterizeArgs {
    /// Instruction kind (conv2d, fully_connected, add, sub, mul, crop, ext,
    /// mean, max, tanh, relu).
    #[arg(long)]
    op: String,
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
}

#[derive(Args)]
struct RunArgs {
    /// gemm | pagerank | hotspot3d | lud | gaussian | backprop | blackscholes
    #[arg(long)]
    app: String,
    /// Problem edge (matrix dimension, grid edge, layer width, or option
    /// count depending on the app).
    #[arg(long)]
    size: usize,
    /// Input value range as LO:HI.
    #[arg(long)]
    range: Option<String>,
    #[arg(long, default_value_t = reef_core::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    devices: usize,
    /// quantized | oracle-replay
    #[arg(long, default_value = "quantized")]
    mode: String,
    /// Write the report to this path (.json or .csv).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also print host wall-clock time (never part of acceptance numbers).
    #[arg(long)]
    wall_clock: bool,
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<RuntimeConfig> {
    match path {
        None => Ok(RuntimeConfig::default()),
        Some(p) => {
            let kv = KvMap::load(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(RuntimeConfig::from_kv(&kv)?)
        }
    }
}

fn parse_range(s: &str) -> anyhow::Result<(f64, f64)> {
    let (lo, hi) = s
        .split_once(':')
        .context("range must be LO:HI, e.g. 0:128")?;
    Ok((lo.trim().parse()?, hi.trim().parse()?))
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let config = load_config(&cli.config)?;
    match cli.command {
        Command::Characterize(args) => {
            let kind = InstructionKind::from_name(&args.op)
                .with_context(|| format!("unknown instruction `{}`", args.op))?;
            let c = characterize(&config.profile, kind, args.rows, args.cols)?;
            println!("op:                 {}", c.op);
            println!("input shape:        {}x{}", c.rows, c.cols);
            println!("input bytes:        {}", c.input_bytes);
            println!(
                "t1:                 {:.3} us ({} executions)",
                c.t1_us,
                reef_bench::characterize::PHASE_ONE_OPS
            );
            println!(
                "t2:                 {:.3} us ({} executions)",
                c.t2_us,
                reef_bench::characterize::PHASE_TWO_OPS
            );
            println!("OPS:                {:.2} ops/s", c.ops_per_second);
            println!("RPS:                {:.2} results/s", c.results_per_second);
            match c.data_exchange_rate {
                Some(rate) => println!("data-exchange rate: {:.2} MB/s", rate / (1 << 20) as f64),
                None => println!("data-exchange rate: n/a (compute dominates transfer)"),
            }
        }
        Command::Run(args) => {
            let app = args.app.parse()?;
            let mode = match args.mode.as_str() {
                "quantized" => ExecMode::Quantized,
                "oracle-replay" => ExecMode::OracleReplay,
                other => bail!("unknown mode `{other}`"),
            };
            let range = match &args.range {
                Some(s) => Some(parse_range(s)?),
                None => None,
            };
            let spec = RunSpec {
                app,
                size: args.size,
                range,
                seed: args.seed,
                devices: args.devices,
                mode,
                config,
            };
            let started = std::time::Instant::now();
            let report = run_app(&spec)?;
            let elapsed = started.elapsed();
            println!("app:              {}", report.app);
            println!("size:             {}", report.size);
            println!("seed:             {}", report.seed);
            println!("mode:             {}", report.mode);
            println!("MAPE:             {:.4} %", report.mape * 100.0);
            println!(
                "RMSE (normalized by reference max-min): {:.4} %",
                report.rmse_normalized * 100.0
            );
            println!("max abs error:    {:.6}", report.max_abs_error);
            println!("saturations:      {}", report.saturation_events);
            println!("overflows:        {}", report.overflow_events);
            println!("input clamps:     {}", report.clamp_events);
            for (kind, n) in &report.instruction_counts {
                println!("iq entries {kind:>16}: {n}");
            }
            for (d, us) in &report.makespans_us {
                println!("simulated makespan @ {d} device(s): {:.1} us", us);
            }
            if args.wall_clock {
                println!("host wall-clock:  {elapsed:?}");
            }
            if let Some(path) = args.report {
                reef_bench::write_report(&report, &path)?;
                println!("report written:   {}", path.display());
            }
        }
        Command::InspectModel { path } => {
            let bytes =
                std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let (block, info) = codec::decode(&bytes)?;
            let mut hasher = Sha256::new();
            hasher.update(&block.values);
            println!("file:           {}", path.display());
            println!("format version: {}", info.version);
            println!("data section:   {} bytes", info.data_len);
            println!("padded shape:   {}", info.padded_shape);
            println!("logical shape:  {}", info.logical_shape);
            println!("scale:          {}", info.scale);
            println!("zero point:     {}", info.zero_point);
            println!("instruction:    {}", info.kind);
            println!("data sha256:    {:x}", hasher.finalize());
        }
    }
    Ok(())
}
