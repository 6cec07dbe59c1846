use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pairlab::Error;

mod commands;

#[derive(Parser)]
#[command(name = "pairlab", version, about = "Simulate and analyze cavity-enhanced photon pair sources")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize detector time tags from a run configuration.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of independently seeded time slices. Output depends on it.
        #[arg(long, default_value_t = 16)]
        chunks: usize,
    },
    /// Simulate one run per analyzer setting and write a count table.
    SimulateCounts {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        settings: SettingSet,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Coincidence window; defaults to the config's analysis.window_ps.
        #[arg(long)]
        window_ps: Option<i64>,
    },
    #[command(subcommand)]
    Analyze(Analysis),
    /// Tabulate etalon transmission for a cavity mode comb.
    DesignEtalon(commands::EtalonArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingSet {
    Chsh,
    Tomo,
    Fringe,
}

#[derive(Subcommand)]
enum Analysis {
    /// Coincidence histogram with exponential bandwidth fits.
    G2 {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4000)]
        bin_ps: i64,
        #[arg(long, default_value_t = 400_000)]
        range_ps: i64,
        /// Integration time; inferred from the last tag when absent.
        #[arg(long)]
        duration_s: Option<f64>,
        /// Also report the comb contrast for this revival period.
        #[arg(long)]
        period_ps: Option<i64>,
    },
    /// CHSH parameter from a count table.
    Chsh {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Maximum-likelihood state reconstruction from a count table.
    Tomo {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Parametric bootstrap resamples for the fidelity error.
        #[arg(long, default_value_t = 0)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fringe visibility from a count table scanning the signal HWP.
    Fringe {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalized spectral brightness.
    Brightness(commands::BrightnessArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::ParameterDomain(_) => 2,
        Error::FitFailure { .. } => 4,
        _ => 3,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::ParameterDomain(_) => "parameter_domain",
        Error::Contract(_) => "contract",
        Error::Degenerate(_) => "degenerate",
        Error::IllConditioned(_) => "ill_conditioned",
        Error::FitFailure { .. } => "fit_failure",
        Error::SamplingBudget { .. } => "sampling_budget",
        Error::Internal(_) => "internal",
        Error::Format(_) => "format",
        Error::Config { .. } => "config",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("PAIRLAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match cli.command {
        Command::Simulate { config, out, seed, chunks } => commands::simulate(&config, &out, seed, chunks),
        Command::SimulateCounts { config, settings, out, seed, window_ps } => {
            let set = match settings {
                SettingSet::Chsh => commands::CountSet::Chsh,
                SettingSet::Tomo => commands::CountSet::Tomography,
                SettingSet::Fringe => commands::CountSet::Fringe,
            };
            commands::simulate_counts(&config, set, &out, seed, window_ps)
        }
        Command::Analyze(a) => match a {
            Analysis::G2 { input, out, bin_ps, range_ps, duration_s, period_ps } => {
                commands::analyze_g2(&input, &out, bin_ps, range_ps, duration_s, period_ps)
            }
            Analysis::Chsh { input, out } => commands::analyze_chsh(&input, &out),
            Analysis::Tomo { input, out, bootstrap, seed } => commands::analyze_tomo(&input, &out, bootstrap, seed),
            Analysis::Fringe { input, out } => commands::analyze_fringe(&input, &out),
            Analysis::Brightness(args) => commands::analyze_brightness(&args),
        },
        Command::DesignEtalon(args) => commands::design_etalon(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let message = e.to_string().replace('"', "'");
            eprintln!("pairlab-error kind={} exit={} message=\"{}\"", kind(&e), code, message);
            ExitCode::from(code)
        }
    }
}
