use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use qtrain::commands::{self, SimulateOptions};
use qtrain::{load_profile, RunManifest, Trainer, CSV_HEADER};
use qtrain_core::memplan::{RunPlan, SearchMode, SearchOptions};
use qtrain_core::model::{PrecisionMap, RecomputeSet};
use qtrain_core::offload::{OffloadSet, TransferPolicy};
use qtrain_core::optim::MomentPrecision;

#[derive(Parser)]
#[command(name = "qtrain", version, about = "FP8/BF16 training emulator and memory/throughput planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model from a manifest; writes the metrics CSV and a checkpoint.
    Train {
        manifest: PathBuf,
        /// Overrides the manifest seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Directory for relative output paths (default: current directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Search for the fastest configuration that fits.
    Plan {
        #[arg(long, default_value = "7b")]
        model: String,
        #[arg(long, default_value = "rtx4090")]
        hardware: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Tokens per optimizer step across all workers.
        #[arg(long, default_value_t = 500_000)]
        batch_tokens: u64,
        #[arg(long, default_value = "fp8-e4m3")]
        precision: PrecisionMap,
        #[arg(long, value_enum, default_value_t = Moments::Bf16)]
        moments: Moments,
        #[arg(long, value_enum)]
        policy: Option<Policy>,
        #[arg(long)]
        no_chunking: bool,
        /// Evaluate every combination instead of skipping dominated ones.
        #[arg(long)]
        exhaustive: bool,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        json: bool,
    },
    /// Run the copy-based reduce-scatter and the issue-queue checker.
    SimulateComms {
        #[arg(long, default_value_t = 4)]
        workers: usize,
        /// Comma-separated gradient sizes in bytes.
        #[arg(long, value_delimiter = ',', default_value = "1048576")]
        sizes: Vec<u64>,
        #[arg(long)]
        p2p: bool,
        #[arg(long, default_value_t = 64e9)]
        link_bandwidth: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Disable the CPU-side barrier after each collective.
        #[arg(long)]
        no_barrier: bool,
        #[arg(long, default_value_t = 2)]
        queue_capacity: usize,
        /// Write the protocol timeline as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Operations per token by precision.
    ReportFlops {
        #[arg(long, default_value = "7b")]
        model: String,
        #[arg(long, default_value = "fp8-e4m3")]
        precision: PrecisionMap,
        #[arg(long)]
        hardware: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Bytes per category on device and host for one plan.
    ReportMemory {
        #[arg(long, default_value = "7b")]
        model: String,
        #[arg(long)]
        hardware: Option<String>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 1)]
        micro_batch: usize,
        #[arg(long, default_value_t = 1)]
        ga_steps: usize,
        #[arg(long, default_value = "none")]
        recompute: RecomputeSet,
        #[arg(long, default_value = "none")]
        offload: OffloadSet,
        #[arg(long, default_value = "fp8-e4m3")]
        precision: PrecisionMap,
        #[arg(long, value_enum, default_value_t = Moments::Bf16)]
        moments: Moments,
        #[arg(long)]
        shard_weights: bool,
        #[arg(long)]
        shard_grads: bool,
        #[arg(long)]
        no_chunking: bool,
        #[arg(long, value_enum, default_value_t = Policy::DoubleBuffer)]
        policy: Policy,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Moments {
    Bf16,
    F32,
}

impl From<Moments> for MomentPrecision {
    fn from(m: Moments) -> Self {
        match m {
            Moments::Bf16 => MomentPrecision::Bf16,
            Moments::F32 => MomentPrecision::F32,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    DoubleBuffer,
    ZeroCopy,
}

impl From<Policy> for TransferPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::DoubleBuffer => TransferPolicy::DoubleBuffer,
            Policy::ZeroCopy => TransferPolicy::ZeroCopy,
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train(manifest: PathBuf, seed: Option<u64>, steps: Option<u64>, out_dir: Option<PathBuf>, quiet: bool) -> Result<()> {
    let mut m = RunManifest::load(&manifest)?;
    if let Some(s) = seed {
        m.seed = s;
    }
    if let Some(s) = steps {
        m.train.steps = s;
    }
    let dir = out_dir.unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let metrics = dir.join(&m.output.metrics);
    let file = std::fs::File::create(&metrics).with_context(|| format!("creating {}", metrics.display()))?;
    let mut csv = std::io::BufWriter::new(file);
    writeln!(csv, "{CSV_HEADER}")?;

    let mut trainer = Trainer::new(&m)?;
    let mut last = None;
    while trainer.step_count() < m.train.steps {
        let row = match trainer.step() {
            Ok(row) => row,
            Err(e) => {
                csv.flush()?;
                return Err(e.context(format!("training stopped; metrics so far in {}", metrics.display())));
            }
        };
        writeln!(csv, "{}", row.csv_line())?;
        if !quiet && row.val_loss.is_some() {
            eprintln!(
                "step {:>5}  loss {:.4}  val {:.4}  |g| {:.3}",
                row.step,
                row.train_loss,
                row.val_loss.unwrap_or(f32::NAN),
                row.grad_norm
            );
        }
        last = Some(row);
    }
    csv.flush()?;
    if let Some(path) = &m.output.checkpoint {
        let path = dir.join(path);
        trainer.save_checkpoint(&path)?;
    }
    let last = last.context("no steps run")?;
    anyhow::ensure!(last.train_loss.is_finite(), "final loss {} is not finite", last.train_loss);
    if !quiet {
        eprintln!("wrote {}", metrics.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { manifest, seed, steps, out_dir, quiet } => train(manifest, seed, steps, out_dir, quiet),
        Command::Plan {
            model,
            hardware,
            workers,
            batch_tokens,
            precision,
            moments,
            policy,
            no_chunking,
            exhaustive,
            top,
            json,
        } => {
            let cfg = commands::resolve_model(&model)?;
            let hw = load_profile(&hardware)?;
            let opts = SearchOptions {
                mode: if exhaustive { SearchMode::Exhaustive } else { SearchMode::Pruned },
                precision,
                moments: moments.into(),
                chunking: !no_chunking,
                target_batch_tokens: batch_tokens,
                transfer_policy: policy.map(Into::into),
                ..SearchOptions::default()
            };
            let report = commands::plan(&cfg, &hw, workers, &opts, top)?;
            if json {
                print_json(&report)
            } else {
                print!("{}", report.table());
                Ok(())
            }
        }
        Command::SimulateComms { workers, sizes, p2p, link_bandwidth, seed, no_barrier, queue_capacity, trace, json } => {
            let report = commands::simulate_comms(&SimulateOptions {
                workers,
                sizes,
                p2p,
                link_bandwidth,
                seed,
                barrier: !no_barrier,
                queue_capacity,
            })?;
            if let Some(path) = trace {
                std::fs::write(&path, qtrain_core::comms::to_jsonl(&report.trace))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if json {
                print_json(&report)
            } else {
                print!("{}", report.table());
                Ok(())
            }
        }
        Command::ReportFlops { model, precision, hardware, json } => {
            let cfg = commands::resolve_model(&model)?;
            let hw = hardware.as_deref().map(load_profile).transpose()?;
            let report = commands::report_flops(&cfg, precision, hw.as_ref())?;
            if json {
                print_json(&report)
            } else {
                print!("{}", report.table());
                Ok(())
            }
        }
        Command::ReportMemory {
            model,
            hardware,
            workers,
            micro_batch,
            ga_steps,
            recompute,
            offload,
            precision,
            moments,
            shard_weights,
            shard_grads,
            no_chunking,
            policy,
            json,
        } => {
            let cfg = commands::resolve_model(&model)?;
            let hw = hardware.as_deref().map(load_profile).transpose()?;
            let plan = RunPlan {
                micro_batch,
                ga_steps,
                recompute,
                offload,
                shard_weights,
                shard_grads,
                precision,
                moments: moments.into(),
                chunking: !no_chunking,
                transfer_policy: policy.into(),
            };
            let report = commands::report_memory(&cfg, &plan, workers, hw.as_ref())?;
            if json {
                print_json(&report)
            } else {
                print!("{}", report.table());
                Ok(())
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
