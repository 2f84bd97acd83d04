//! `qfc`: command-line front end for the conversion-chain model.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qfc_core::config::{Arm, SetupChoice};
use qfc_core::fitting::Model;
use qfc_core::phasematch::TuningAxis;

/// Digital twin of a quantum-dot frequency conversion interface.
#[derive(Debug, Parser)]
#[command(name = "qfc", version, about)]
struct Cli {
    /// Worker threads for simulation and correlation (default: all cores).
    /// Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run configuration (TOML). Falls back to the built-in calibrated preset.
    #[arg(env = "QFC_CONFIG")]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Phase-matching tuning curves, widths and solved operating points.
    Phasematch {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "temperature", value_parser = parse_axis)]
        axis: TuningAxis,
        /// Scan range `lo:hi` in the axis unit (default: around the operating point).
        #[arg(long, value_parser = parse_range)]
        range: Option<(f64, f64)>,
        #[arg(long, default_value_t = 401)]
        samples: usize,
        /// Signal wavelengths (nm) to re-tune to; one curve each.
        #[arg(long, value_delimiter = ',')]
        signal: Vec<f64>,
        #[arg(long, default_value = "qfc-out/phasematch")]
        out: PathBuf,
    },
    /// Rate budget through the conversion chain.
    Chain {
        #[command(flatten)]
        config: ConfigArg,
        /// Override the pump power, W.
        #[arg(long)]
        pump_power: Option<f64>,
        #[arg(long, default_value = "qfc-out/chain")]
        out: PathBuf,
    },
    /// Monte Carlo detector time tags for one setup.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_parser = parse_setup)]
        setup: SetupChoice,
        /// Default: the config's simulation.arm.
        #[arg(long, value_parser = parse_arm)]
        arm: Option<Arm>,
        /// Default: the config's simulation.pulses.
        #[arg(long)]
        pulses: Option<u64>,
        /// Default: the config's simulation.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "qfc-out/simulate")]
        out: PathBuf,
    },
    /// Coincidence histogram and g²(0) of a tag file.
    Correlate {
        tags: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[arg(long, default_value = "qfc-out/correlate")]
        out: PathBuf,
    },
    /// HOM visibility and corrected indistinguishability from co/cross tag files.
    Hom {
        co: PathBuf,
        cross: PathBuf,
        /// g²(0) as `value`, `value:error`, or a correlate results JSON.
        #[arg(long)]
        g2: String,
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[arg(long, default_value = "qfc-out/hom")]
        out: PathBuf,
    },
    /// Weighted least-squares fit of `x,y,sigma` data.
    Fit {
        data: PathBuf,
        #[arg(long, default_value = "sin2-sqrt-power", value_parser = parse_model)]
        model: Model,
        /// Initial parameters, comma separated (model order).
        #[arg(long, value_delimiter = ',', required = true)]
        guess: Vec<f64>,
        /// Pinned parameters as `name=value`.
        #[arg(long, value_parser = parse_pin)]
        fix: Vec<(String, f64)>,
        #[arg(long, default_value = "qfc-out/fit")]
        out: PathBuf,
    },
    /// Full reproduction pipeline and summary table.
    Report {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        pulses: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "qfc-out/report")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct AnalysisArgs {
    /// Configuration supplying analysis defaults.
    #[arg(long, env = "QFC_CONFIG")]
    config: Option<PathBuf>,
    /// Bin width, ps.
    #[arg(long)]
    bin: Option<u64>,
    /// Histogram half-range, ps.
    #[arg(long)]
    range: Option<u64>,
    /// Peak spacing, ps.
    #[arg(long)]
    period: Option<f64>,
    /// Peak window half-width, ps.
    #[arg(long)]
    window: Option<f64>,
}

fn parse_axis(s: &str) -> Result<TuningAxis, String> {
    s.parse().map_err(|e: qfc_core::Error| e.to_string())
}

fn parse_setup(s: &str) -> Result<SetupChoice, String> {
    s.parse().map_err(|e: qfc_core::Error| e.to_string())
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    s.parse().map_err(|e: qfc_core::Error| e.to_string())
}

fn parse_model(s: &str) -> Result<Model, String> {
    match s {
        "sin2-sqrt-power" | "sin2_sqrt_power" => Ok(Model::Sin2SqrtPower),
        "sinc2-detuning" | "sinc2_detuning" => Ok(Model::Sinc2Detuning),
        other => Err(format!("unknown model `{other}` (sin2-sqrt-power, sinc2-detuning)")),
    }
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected `lo:hi`")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

fn parse_pin(s: &str) -> Result<(String, f64), String> {
    let (name, v) = s.split_once('=').ok_or("expected `name=value`")?;
    Ok((name.trim().to_string(), v.trim().parse().map_err(|e| format!("{e}"))?))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
