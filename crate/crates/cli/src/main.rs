//! `emitterlab`: reproducible single-photon emitter analysis pipelines.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::io::{load_config, parse_config, CliError, Context};

#[derive(Parser)]
#[command(name = "emitterlab", version, about = "Single-photon emitter simulation, correlation and fitting")]
struct Cli {
    /// JSON config with the subcommand's parameters; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (default 0, or `seed` from the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a three-level emitter on a two-detector setup.
    Simulate(SimulateArgs),
    /// Cross-correlate two timestamp files.
    Correlate(ChannelPairArgs),
    /// Fit the continuous-wave g2 model.
    FitG2(FitG2Args),
    /// Fit a saturation curve.
    FitSaturation(DataArgs),
    /// Fit a fluorescence decay.
    FitLifetime(DataArgs),
    /// Fit a polarization dependence.
    FitPolarization(DataArgs),
    /// Extract transition rates from a power series of g2 fits.
    Rates(RatesArgs),
    /// Peak-area g2(0) under pulsed excitation.
    PulsedG2(PulsedArgs),
    /// Binned intensity trace and blinking check.
    Trace(TraceArgs),
    /// Zero-phonon line distribution of defects near stacking faults.
    Zpl(ZplArgs),
    /// Collection half-angle, quantum efficiency and enhancement.
    Budget,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    duration_ms: Option<f64>,
}

#[derive(Args)]
struct ChannelPairArgs {
    #[arg(long)]
    a: Option<PathBuf>,
    #[arg(long)]
    b: Option<PathBuf>,
    #[arg(long)]
    bin_ps: Option<u64>,
    #[arg(long)]
    window_ns: Option<f64>,
}

#[derive(Args)]
struct FitG2Args {
    /// Histogram CSV written by `correlate`.
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[command(flatten)]
    pair: ChannelPairArgs,
    /// `free` or `constrained`.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct RatesArgs {
    #[arg(long)]
    series: Option<PathBuf>,
    #[arg(long)]
    measured_lifetime_ps: Option<f64>,
}

#[derive(Args)]
struct PulsedArgs {
    #[arg(long)]
    a: Option<PathBuf>,
    #[arg(long)]
    b: Option<PathBuf>,
    #[arg(long)]
    rep_rate_mhz: Option<f64>,
    #[arg(long)]
    n_peaks: Option<usize>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    a: Option<PathBuf>,
    #[arg(long)]
    bin_ms: Option<f64>,
}

#[derive(Args)]
struct ZplArgs {
    /// Stacking sequence such as `hhccchh`.
    #[arg(long)]
    stack: Option<String>,
}

/// Sets each present flag on the top-level config object.
fn overlay(cfg: &mut Value, flags: Vec<(&str, Option<Value>)>) {
    if let Value::Object(map) = cfg {
        for (k, v) in flags {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        }
    }
}

fn path(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| json!(p))
}

fn pair_flags(p: &ChannelPairArgs) -> Vec<(&'static str, Option<Value>)> {
    vec![
        ("a", path(&p.a)),
        ("b", path(&p.b)),
        ("bin_ps", p.bin_ps.map(|v| json!(v))),
        ("window_ns", p.window_ns.map(|v| json!(v))),
    ]
}

fn set_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("EMITTERLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Input(format!("EMITTERLAB_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(io::input_err)
}

fn run(cli: Cli) -> Result<(), CliError> {
    set_threads()?;
    let (mut cfg, cfg_seed) = load_config(cli.config.as_deref())?;
    let seed = cli.seed.or(cfg_seed).unwrap_or(0);
    let ctx = |subcommand| Context { out: cli.out.clone(), seed, subcommand };
    match &cli.command {
        Command::Simulate(a) => {
            overlay(&mut cfg, vec![("duration_ms", a.duration_ms.map(|v| json!(v)))]);
            commands::simulate(&ctx("simulate"), parse_config(cfg, "simulate")?)
        }
        Command::Correlate(a) => {
            overlay(&mut cfg, pair_flags(a));
            commands::correlate_cmd(&ctx("correlate"), parse_config(cfg, "correlate")?)
        }
        Command::FitG2(a) => {
            let mut flags = pair_flags(&a.pair);
            flags.push(("histogram", path(&a.histogram)));
            flags.push(("mode", a.mode.as_ref().map(|m| json!(m))));
            overlay(&mut cfg, flags);
            commands::fit_g2(&ctx("fit-g2"), parse_config(cfg, "fit-g2")?)
        }
        Command::FitSaturation(a) => {
            overlay(&mut cfg, vec![("data", path(&a.data))]);
            commands::fit_saturation_cmd(&ctx("fit-saturation"), parse_config(cfg, "fit-saturation")?)
        }
        Command::FitLifetime(a) => {
            overlay(&mut cfg, vec![("data", path(&a.data))]);
            commands::fit_lifetime_cmd(&ctx("fit-lifetime"), parse_config(cfg, "fit-lifetime")?)
        }
        Command::FitPolarization(a) => {
            overlay(&mut cfg, vec![("data", path(&a.data))]);
            commands::fit_polarization_cmd(&ctx("fit-polarization"), parse_config(cfg, "fit-polarization")?)
        }
        Command::Rates(a) => {
            overlay(
                &mut cfg,
                vec![("series", path(&a.series)), ("measured_lifetime_ps", a.measured_lifetime_ps.map(|v| json!(v)))],
            );
            commands::rates(&ctx("rates"), parse_config(cfg, "rates")?)
        }
        Command::PulsedG2(a) => {
            overlay(
                &mut cfg,
                vec![
                    ("a", path(&a.a)),
                    ("b", path(&a.b)),
                    ("rep_rate_mhz", a.rep_rate_mhz.map(|v| json!(v))),
                    ("n_peaks", a.n_peaks.map(|v| json!(v))),
                ],
            );
            commands::pulsed(&ctx("pulsed-g2"), parse_config(cfg, "pulsed-g2")?)
        }
        Command::Trace(a) => {
            overlay(&mut cfg, vec![("a", path(&a.a)), ("bin_ms", a.bin_ms.map(|v| json!(v)))]);
            commands::trace(&ctx("trace"), parse_config(cfg, "trace")?)
        }
        Command::Zpl(a) => {
            overlay(&mut cfg, vec![("stack", a.stack.as_ref().map(|s| json!(s)))]);
            commands::zpl(&ctx("zpl"), parse_config(cfg, "zpl")?)
        }
        Command::Budget => commands::budget(&ctx("budget"), parse_config(cfg, "budget")?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
