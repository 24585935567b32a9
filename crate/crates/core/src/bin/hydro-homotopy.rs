use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use hydro_homotopy::io::{describe_failures, run, Overrides, RunConfig, RunError};

/// Optimize a hydropower cascade release schedule by continuation from the
/// linear surrogate to the full nonlinear model.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// Cascade configuration (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Nominal continuation step in θ.
    #[arg(long)]
    theta_step: Option<f64>,
    /// Final barrier parameter.
    #[arg(long)]
    mu_min: Option<f64>,
    /// KKT residual tolerance per barrier level.
    #[arg(long)]
    kkt_tol: Option<f64>,
    /// Keep the θ step fixed instead of halving on failure.
    #[arg(long)]
    no_adaptive: bool,
    /// Write the structural report and exit without solving.
    #[arg(long)]
    check_only: bool,
    /// Only print errors.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = RunConfig {
        overrides: Overrides {
            theta_step: cli.theta_step,
            mu_min: cli.mu_min,
            kkt_tolerance: cli.kkt_tol,
            no_adaptive: cli.no_adaptive,
        },
        check_only: cli.check_only,
        ..RunConfig::new(&cli.spec, &cli.out)
    };
    match execute(&config, cli.quiet) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err
                .downcast_ref::<RunError>()
                .map_or(1, RunError::exit_code);
            eprintln!("error: {err:#}");
            if let Some(RunError::Structural { report, .. }) = err.downcast_ref::<RunError>() {
                eprint!("{}", describe_failures(report));
            }
            ExitCode::from(code)
        }
    }
}

fn execute(config: &RunConfig, quiet: bool) -> anyhow::Result<()> {
    let summary = run(config).with_context(|| format!("run on {}", config.spec_path.display()))?;
    if quiet {
        return Ok(());
    }
    println!(
        "structural checks passed ({} sample points)",
        summary.report.sample_points.len()
    );
    if let Some(path) = &summary.path {
        println!(
            "path: {} entries, theta {} -> {}",
            path.entries.len(),
            path.first().map_or(f64::NAN, |e| e.theta),
            path.last().map_or(f64::NAN, |e| e.theta)
        );
    }
    if let Some(c) = &summary.comparison {
        println!(
            "energy, linear schedule:    {:.3} MWh",
            c.energy_linear_schedule
        );
        println!(
            "energy, nonlinear schedule: {:.3} MWh",
            c.energy_nonlinear_schedule
        );
        println!("gain: {:.3} MWh ({:.2}%)", c.absolute_gain, c.relative_gain);
        println!("wall time: {:.1} ms", c.wall_time_ms);
    }
    for p in &summary.written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
