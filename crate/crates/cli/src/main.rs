//! `purcellsim` — reproducible dispersive-readout experiments from one JSON
//! config: reflection spectra, noise-sensitivity sweeps, bifurcation ramps,
//! Purcell reports, master-equation runs, noise Monte Carlo, and parameter
//! fits. Every run writes `summary.json` (plus per-command CSV/JSON
//! artifacts) atomically into the output directory.
//!
//! Exit codes: 0 success, 1 configuration/I-O problems, 2 numerical
//! failures, 3 solver or fit non-convergence.

mod commands;
mod config;
mod errors;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use purcellsim_core::par::set_threads;

use commands::{finish_summary, Ctx};
use config::load_config;
use errors::CliError;

#[derive(Parser)]
#[command(
    name = "purcellsim",
    version,
    about = "Dispersive qubit readout through a nonlinear Purcell filter: \
             spectra, dephasing budgets, bifurcation, and parameter fits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON)
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Output directory (overrides the config's `out_dir`)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Base RNG seed (overrides the config's `seed`)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-thread cap (default: all cores; env PURCELLSIM_THREADS)
    #[arg(long)]
    threads: Option<usize>,
    /// Echo summary.json to stdout
    #[arg(long)]
    json_summary: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Reflection spectra for both qubit states (linear or driven-Kerr)
    Spectrum(CommonArgs),
    /// Photon-noise dephasing sensitivity versus filter detuning
    Sensitivity(CommonArgs),
    /// Steady branches and measurement rate along a drive-power ramp
    Bifurcation(CommonArgs),
    /// Qubit relaxation through the filter versus a bare resonator
    Purcell(CommonArgs),
    /// Truncated master-equation evolution with dephasing extraction
    Lindblad(CommonArgs),
    /// Band-limited photon-noise dephasing Monte Carlo over seeds
    NoiseMc(CommonArgs),
    /// Shared-parameter fit of dephasing spectra across coil groups
    Fit(CommonArgs),
    /// Filter-anharmonicity fit from driven reflection phases
    FitKerr(CommonArgs),
}

impl Command {
    fn split(&self) -> (&'static str, &CommonArgs) {
        match self {
            Command::Spectrum(a) => ("spectrum", a),
            Command::Sensitivity(a) => ("sensitivity", a),
            Command::Bifurcation(a) => ("bifurcation", a),
            Command::Purcell(a) => ("purcell", a),
            Command::Lindblad(a) => ("lindblad", a),
            Command::NoiseMc(a) => ("noise-mc", a),
            Command::Fit(a) => ("fit", a),
            Command::FitKerr(a) => ("fit-kerr", a),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let (name, args) = cli.command.split();

    let threads = args.threads.or_else(|| {
        std::env::var("PURCELLSIM_THREADS").ok().and_then(|v| v.parse().ok())
    });
    set_threads(threads);

    std::process::exit(run(name, args));
}

fn run(name: &str, args: &CommonArgs) -> i32 {
    let (ctx, result) = match prepare(args) {
        Ok(ctx) => {
            let result = dispatch(name, &ctx);
            (Some(ctx), result)
        }
        Err(e) => (None, Err(e)),
    };

    match result {
        Ok(body) => {
            let ctx = ctx.expect("success implies a prepared context");
            let summary = finish_summary(name, ctx.seed, body);
            match write_summary(&ctx.out_dir.join("summary.json"), &summary) {
                Ok(text) => {
                    if args.json_summary {
                        println!("{text}");
                    }
                    0
                }
                Err(e) => {
                    eprintln!("purcellsim {name}: {e}");
                    e.exit_code()
                }
            }
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("purcellsim {name}: {e}");
            // record the failure next to any partial artifacts, best-effort
            if let Some(ctx) = &ctx {
                let summary = finish_summary(
                    name,
                    ctx.seed,
                    json!({"error": e.to_string(), "exit_code": code}),
                );
                if let Ok(text) = write_summary(&ctx.out_dir.join("summary.json"), &summary) {
                    if args.json_summary {
                        println!("{text}");
                    }
                }
            }
            code
        }
    }
}

/// Load the config, resolve the output directory and seed precedence
/// (flag > config > default).
fn prepare(args: &CommonArgs) -> Result<Ctx, CliError> {
    let loaded = load_config(&args.config)?;
    let out_dir = match &args.out {
        Some(dir) => dir.clone(),
        None => {
            let configured = loaded.cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
            config::resolve(&loaded.dir, &configured)
        }
    };
    let seed = args.seed.or(loaded.cfg.seed).unwrap_or(0);
    Ok(Ctx { loaded, out_dir, seed })
}

fn dispatch(name: &str, ctx: &Ctx) -> Result<Value, CliError> {
    match name {
        "spectrum" => commands::cmd_spectrum(ctx),
        "sensitivity" => commands::cmd_sensitivity(ctx),
        "bifurcation" => commands::cmd_bifurcation(ctx),
        "purcell" => commands::cmd_purcell(ctx),
        "lindblad" => commands::cmd_lindblad(ctx),
        "noise-mc" => commands::cmd_noise_mc(ctx),
        "fit" => commands::cmd_fit(ctx),
        "fit-kerr" => commands::cmd_fit_kerr(ctx),
        _ => unreachable!("clap restricts the subcommand set"),
    }
}

fn write_summary(path: &std::path::Path, summary: &Map<String, Value>) -> Result<String, CliError> {
    output::write_json(path, summary)
        .map_err(|e| CliError::io(format!("writing {}: {e}", path.display())))
}
