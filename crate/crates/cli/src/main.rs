use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gulm_cli::{cmd_evaluate, cmd_localize, cmd_render, cmd_simulate, exit_code, CommonArgs};

/// Beamforming-free ultrasound localization microscopy.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Active channels, e.g. `0..15`, `3,7,11` or `even:16`.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    threads: Option<usize>,
    /// Clutter level `L_C` in dB; enables simulated noise.
    #[arg(long, allow_hyphen_values = true)]
    noise_clutter_db: Option<f64>,
}

impl From<Common> for CommonArgs {
    fn from(c: Common) -> Self {
        Self {
            config: c.config,
            channels: c.channels,
            seed: c.seed,
            threads: c.threads,
            noise_clutter_db: c.noise_clutter_db,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate RF frames and ground truth into a directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        frames: u64,
        /// Bubbles per frame; overrides the config.
        #[arg(long)]
        bubbles: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize microbubbles in an RF container.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        /// Locations CSV; the report is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score locations against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        locations: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Per-frame score CSV; the summary is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a density image (PNG or PGM by extension).
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        locations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GULM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Simulate { common, frames, bubbles, out } => cmd_simulate(&common.into(), frames, bubbles, &out),
        Command::Localize { common, input, out } => cmd_localize(&common.into(), &input, &out).map(|_| ()),
        Command::Evaluate { common, locations, truth, out } => {
            cmd_evaluate(&common.into(), &locations, &truth, &out).map(|s| println!("{s}"))
        }
        Command::Render { common, locations, out } => cmd_render(&common.into(), &locations, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
