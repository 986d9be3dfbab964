use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pid_lagrangian::exec::Execution;
use pid_lagrangian::harness::{run_spec, ExperimentKind, ExperimentSpec};

#[derive(Parser)]
#[command(name = "pidlag", version, about = "PID Lagrangian controllers for constrained RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate differential multiplier flows and check their second-order form.
    Flow(RunArgs),
    /// Train a policy (one or more cells) on a CMDP.
    Train(RunArgs),
    /// Sweep controller gains over seeds.
    Sweep(RunArgs),
    /// Step the cost limit mid-run and measure overshoot.
    LimitStep(RunArgs),
    /// Compare runs across reward scales.
    Scale(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; defaults to the spec's `output` entry.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Added to every seed in the spec.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
    /// Run cells one at a time.
    #[arg(long)]
    sequential: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Flow(a) => (ExperimentKind::Flow, a),
        Command::Train(a) => (ExperimentKind::Train, a),
        Command::Sweep(a) => (ExperimentKind::Sweep, a),
        Command::LimitStep(a) => (ExperimentKind::LimitStep, a),
        Command::Scale(a) => (ExperimentKind::Scale, a),
    };
    match run(kind, &args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<bool, Box<dyn std::error::Error>> {
    let spec = ExperimentSpec::load(&args.spec)?;
    if spec.kind != kind {
        return Err(format!("spec kind is '{}' but the command is '{}'", spec.kind.as_str(), kind.as_str()).into());
    }
    let out = args
        .out
        .clone()
        .or_else(|| spec.output.clone())
        .ok_or("no output directory: pass --out or set `output` in the spec")?;
    let exec = if args.sequential { Execution::Sequential } else { Execution::default() };
    let report = run_spec(&spec, &out, args.seed_offset, exec)?;
    for (cell, reason) in &report.failures {
        eprintln!("failed: {cell}: {reason}");
    }
    println!(
        "{}: {} cells, {} failed, output in {}",
        spec.name,
        report.cells,
        report.failures.len(),
        out.display()
    );
    Ok(report.success())
}
