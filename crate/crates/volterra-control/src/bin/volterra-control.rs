//! Command-line interface for the SVIE control toolkit.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use volterra_control::cli::{run_command, Command as ToolCommand, Overrides};

#[derive(Parser)]
#[command(
    name = "volterra-control",
    about = "Simulation, adjoints and maximum-principle checks for controlled stochastic Volterra integral equations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Scenario file path.
    #[arg(long)]
    scenario: PathBuf,
    /// Override the noise backend (`tree` or `mc`).
    #[arg(long)]
    backend: Option<String>,
    /// Override the Monte Carlo path count.
    #[arg(long)]
    paths: Option<usize>,
    /// Override the number of grid steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the Monte Carlo seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the checker tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Override the checker mode (`full` or `diagonal:K`).
    #[arg(long)]
    mode: Option<String>,
    /// Output directory for tables, report.json and summary.txt.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Sample the standing assumptions of the scenario's problem.
    Validate(CommonArgs),
    /// Solve the state equation under the reference control.
    Simulate(CommonArgs),
    /// Solve the first-order adjoint backward equation and dump it.
    Adjoint(CommonArgs),
    /// Verify the maximum conditions at the reference control.
    MpCheck(CommonArgs),
    /// Solve the linear-quadratic problem and evaluate the case conditions.
    LqSolve(CommonArgs),
    /// Run the spike-variation order and asymptotic experiments.
    SpikeExp(CommonArgs),
    /// End-to-end epidemic pipeline: optimise, verify, experiment.
    EpidemicDemo(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        CliCommand::Validate(a) => (ToolCommand::Validate, a),
        CliCommand::Simulate(a) => (ToolCommand::Simulate, a),
        CliCommand::Adjoint(a) => (ToolCommand::Adjoint, a),
        CliCommand::MpCheck(a) => (ToolCommand::MpCheck, a),
        CliCommand::LqSolve(a) => (ToolCommand::LqSolve, a),
        CliCommand::SpikeExp(a) => (ToolCommand::SpikeExp, a),
        CliCommand::EpidemicDemo(a) => (ToolCommand::EpidemicDemo, a),
    };
    let text = match std::fs::read_to_string(&args.scenario) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.scenario.display());
            return ExitCode::from(2);
        }
    };
    let overrides = Overrides {
        backend: args.backend.clone(),
        paths: args.paths,
        steps: args.steps,
        seed: args.seed,
        tolerance: args.tol,
        mode: args.mode.clone(),
    };
    match run_command(command, &text, &overrides) {
        Ok(bundle) => {
            if let Err(e) = bundle.write_to(&args.out) {
                eprintln!("error: cannot write results: {e}");
                return ExitCode::from(2);
            }
            for line in &bundle.summary {
                println!("{line}");
            }
            println!(
                "{}: {} (results in {})",
                bundle.command,
                if bundle.passed { "pass" } else { "FAIL" },
                args.out.display()
            );
            ExitCode::from(bundle.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
