//! `blindmi`: reproducible end-to-end runs of the blind membership
//! inference attacks on the synthetic overfit benchmark.
//!
//! Stages: `synth` -> `train` -> `probe` -> `attack` -> `eval`, plus `sweep`,
//! which runs the whole pipeline in memory across seeds.

/// `println!` that ignores a closed stdout, e.g. when piped into `head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

mod commands;
mod config;
mod failure;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use blindmi_core::harness::AttackKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::{AttackArgs, SweepKind};
use crate::failure::Failure;

#[derive(Parser)]
#[command(name = "blindmi", version, about = "Blind membership inference by differential comparison")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply to anything it leaves out.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set benchmark.synthetic.label_noise=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for data, training and the shadow classifier.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root. Falls back to the config's `out_dir`, then $BLINDMI_OUT,
    /// then ./blindmi-out.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for batches and sweep cells.
    #[arg(short, long, global = true)]
    jobs: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the training, held-out, shadow and generated input sets.
    Synth,
    /// Train the target model and, if enabled, the shadow model.
    Train,
    /// Probe the target model on the target set and generated inputs.
    Probe {
        /// Leave true labels and membership out of the target probes.
        #[arg(long)]
        blind: bool,
    },
    /// Run attacks on the probe files.
    Attack {
        /// Attack to run (repeatable). Defaults to the config's `attacks`.
        #[arg(short, long = "attack", value_name = "NAME")]
        attacks: Vec<AttackKind>,
        /// Target probe file instead of the one `probe` wrote.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Batch)]
        mode: Mode,
        /// Record to classify in incremental mode.
        #[arg(long, value_name = "ID")]
        record: Option<String>,
        /// Write convergence logs in long `series,x,metric,value` form.
        #[arg(long)]
        plot_data: bool,
    },
    /// Score prediction files against ground truth.
    Eval {
        /// Prediction CSVs. Defaults to everything `attack` wrote.
        #[arg(short, long = "predictions", value_name = "PATH")]
        predictions: Vec<PathBuf>,
        /// Ground truth: `id,is_member` CSV or a probe file with membership.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Nonmember-ratio and class-count sweeps over the config's seeds.
    Sweep {
        #[arg(long, value_enum, default_value_t = Sweep::All)]
        kind: Sweep,
        /// Write sweep tables in long `series,x,metric,value` form.
        #[arg(long)]
        plot_data: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Batch,
    Incremental,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Ratio,
    Class,
    All,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(Failure::config("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::config(format!("cannot start {jobs} worker threads: {e}")))?;
    }
    let run = config::resolve(
        common.config.as_deref(),
        &common.overrides,
        common.seed,
        common.out.as_deref(),
    )?;
    log::info!("config digest {}, output root {}", run.digest, run.out.display());
    match cli.command {
        Command::Synth => commands::synth(&run),
        Command::Train => commands::train(&run),
        Command::Probe { blind } => commands::probe(&run, blind),
        Command::Attack {
            attacks,
            target,
            mode,
            record,
            plot_data,
        } => commands::attack(
            &run,
            &AttackArgs {
                attacks,
                target,
                record,
                incremental: matches!(mode, Mode::Incremental),
                plot_data,
            },
        ),
        Command::Eval { predictions, truth } => commands::eval(&run, &predictions, truth.as_deref()),
        Command::Sweep { kind, plot_data } => {
            let kind = match kind {
                Sweep::Ratio => SweepKind::Ratio,
                Sweep::Class => SweepKind::Class,
                Sweep::All => SweepKind::All,
            };
            commands::sweep(&run, kind, plot_data)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
