//! `g4vdyn`: batch replication runner for the charge-stabilised emitter
//! toolkit. One subcommand per experiment; every run writes CSV data, a JSON
//! summary, plot files with sidecars and a manifest that pins the full
//! configuration and seed.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use g4vdyn::config::{load_config, Config, Provenance};
use g4vdyn::error::Error;
use g4vdyn::fit::CptParam;

use commands::{CommandError, FitModel};
use output::{OutputFormat, RunWriter};

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 2;
const EXIT_SIMULATION: u8 = 3;
const EXIT_STRICT_FIT: u8 = 4;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(
    name = "g4vdyn",
    version,
    about = "Simulate and fit the charge, spectral, spin and readout experiments of a charge-stabilised emitter"
)]
struct Cli {
    /// Configuration file (JSON with `emitter`, `charge`, `simulation`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; every random stream derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Exit with code 4 when a fit does not converge.
    #[arg(long, global = true)]
    strict: bool,

    /// Worker threads; falls back to G4VDYN_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Which outputs to write.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Both)]
    format: OutputFormat,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Charge telegraph trace under pulsed blue + resonant illumination.
    Telegraph,
    /// Electron-capture duration histogram and rate fit.
    Capture,
    /// Initialisation efficiency versus blue pulse length.
    InitEff,
    /// Two-colour fluorescence enhancement spectrum.
    Enhance,
    /// Long-term PLE scan series with spectral diffusion.
    PleSeries,
    /// Steady-state coherent-population-trapping spectrum.
    Cpt,
    /// Single-shot spin readout fidelity.
    Readout,
    /// Fit a model to a CSV data file.
    Fit {
        /// Model to fit.
        #[arg(long, value_enum)]
        model: FitModel,
        /// Input CSV file.
        #[arg(long)]
        data: PathBuf,
        /// Free parameters for the CPT model.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "gamma-s")]
        free: Vec<CliCptParam>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Telegraph => "telegraph",
            Command::Capture => "capture",
            Command::InitEff => "init-eff",
            Command::Enhance => "enhance",
            Command::PleSeries => "ple-series",
            Command::Cpt => "cpt",
            Command::Readout => "readout",
            Command::Fit { .. } => "fit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum CliCptParam {
    Omega1,
    Omega2,
    GammaS,
    Delta1,
    Background,
}

impl From<CliCptParam> for CptParam {
    fn from(p: CliCptParam) -> Self {
        match p {
            CliCptParam::Omega1 => CptParam::Omega1,
            CliCptParam::Omega2 => CptParam::Omega2,
            CliCptParam::GammaS => CptParam::GammaS,
            CliCptParam::Delta1 => CptParam::Delta1,
            CliCptParam::Background => CptParam::Background,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(CommandError::Strict) => {
            eprintln!("error: fit did not converge (--strict)");
            ExitCode::from(EXIT_STRICT_FIT)
        }
        Err(CommandError::Core(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Validation { .. } | Error::Io(_) => EXIT_CONFIG,
        Error::InsufficientStatistics(_)
        | Error::DegenerateSteadyState { .. }
        | Error::Integration(_)
        | Error::Statistics(_)
        | Error::RankDeficient(_) => EXIT_SIMULATION,
    }
}

fn load(cli: &Cli) -> Result<(Config, Provenance), Error> {
    match &cli.config {
        Some(path) => load_config(path),
        None => Ok((Config::default(), Provenance::new())),
    }
}

fn run(cli: &Cli) -> Result<(), CommandError> {
    let (config, provenance) = load(cli)?;
    for (key, source) in &provenance {
        log::debug!("config {key}: {source:?}");
    }

    let threads = cli.threads.or_else(|| {
        std::env::var("G4VDYN_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut writer = RunWriter::new(cli.command.name(), &cli.out, cli.format, cli.seed, config)?;
    pool.install(|| dispatch(cli, &mut writer))?;
    writer.finish()?;
    Ok(())
}

fn dispatch(cli: &Cli, writer: &mut RunWriter) -> Result<(), CommandError> {
    match &cli.command {
        Command::Telegraph => commands::telegraph(writer),
        Command::Capture => commands::capture(writer, cli.strict),
        Command::InitEff => commands::init_eff(writer, cli.strict),
        Command::Enhance => commands::enhance(writer),
        Command::PleSeries => commands::ple_series(writer),
        Command::Cpt => commands::cpt(writer),
        Command::Readout => commands::readout(writer),
        Command::Fit { model, data, free } => {
            let free: Vec<CptParam> = free.iter().map(|&p| p.into()).collect();
            commands::fit_command(writer, *model, data, &free, cli.strict)
        }
    }
}
