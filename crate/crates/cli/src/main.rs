use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hierax_cli::commands::{self, BenchClosedLoopArgs, BenchSolversArgs, GenDataArgs, SimulateArgs, TrainArgs};
use hierax_cli::config::ConfigDocument;
use hierax_cli::CliError;

/// Hierarchical NMPC experiments: closed-loop simulation, surrogate data
/// generation and training, solver and closed-loop benchmarks.
///
/// Exit status: 0 on success, 1 on a runtime failure or failed assertion,
/// 2 on a configuration error. HIERAX_SEED replaces every seed of the
/// configuration.
#[derive(Parser)]
#[command(name = "hierax", version)]
struct Cli {
    /// Worker threads (default: logical cores). Affects wall time only.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults apply to everything it leaves out.
    #[arg(long, short, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Leave wall-time columns out of result files.
    #[arg(long)]
    no_wall_time: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured closed-loop scenario.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory for trajectory.csv and summary.csv.
        #[arg(long, short, value_name = "DIR")]
        out: PathBuf,
        /// Surrogate model, overriding surrogate.model.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
    },
    /// Collect labelled local problems of subsystem 0 into a CSV dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset file to write.
        #[arg(long, short, value_name = "FILE")]
        out: PathBuf,
        /// Number of records, overriding data.records.
        #[arg(long, short = 'n', value_name = "N")]
        records: Option<usize>,
        /// Seed of the excitation runs, overriding data.seed and HIERAX_SEED.
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,
        /// Re-solve a sample of the written labels and fail on a mismatch.
        #[arg(long)]
        verify: bool,
    },
    /// Train a surrogate network with RPROP.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset written by gen-data.
        #[arg(long, short, value_name = "FILE")]
        data: PathBuf,
        /// Model file to write (the selected one with --sweep).
        #[arg(long, short, value_name = "FILE")]
        out: PathBuf,
        /// Hidden layer widths, comma separated, overriding surrogate.hidden.
        #[arg(long, value_delimiter = ',', value_name = "W,..")]
        hidden: Option<Vec<usize>>,
        /// Training epochs, overriding surrogate.training.epochs.
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
        /// Train 1, 2 and 3 hidden layers of 25 units and keep the best.
        #[arg(long)]
        sweep: bool,
        /// Write the per-epoch MSE curve to this CSV file.
        #[arg(long, value_name = "FILE")]
        curve: Option<PathBuf>,
    },
    /// Solver or closed-loop comparison.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Configuration utilities.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Truncated fast gradient against the converged reference.
    Solvers {
        #[command(flatten)]
        common: Common,
        /// Output directory for solvers.csv.
        #[arg(long, short, value_name = "DIR")]
        out: PathBuf,
        /// Number of local problems, overriding bench.instances.
        #[arg(long, short = 'n', value_name = "N")]
        instances: Option<usize>,
        /// Fail when J_bar exceeds this percentage.
        #[arg(long, value_name = "PCT")]
        assert_jbar_max: Option<f64>,
        /// Fail when J_bar falls below this percentage.
        #[arg(long, value_name = "PCT")]
        assert_jbar_min: Option<f64>,
    },
    /// Exact and surrogate controllers under one disturbance realization.
    Closedloop {
        #[command(flatten)]
        common: Common,
        /// Output directory for closedloop.csv.
        #[arg(long, short, value_name = "DIR")]
        out: PathBuf,
        /// Surrogate model, overriding surrogate.model.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ConfigCommand {
    /// Print the normalized configuration with every default filled in.
    Echo {
        /// TOML configuration; omit to print the defaults.
        #[arg(long, short, value_name = "FILE")]
        config: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ConfigDocument, CliError> {
    let mut doc = ConfigDocument::load(common.config.as_deref())?;
    doc.apply_seed_env()?;
    Ok(doc)
}

fn run(cli: Cli) -> Result<String, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot configure {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Simulate { common, out, model } => commands::simulate(
            &load(&common)?,
            &SimulateArgs {
                out_dir: &out,
                model: model.as_deref(),
                with_wall_time: !common.no_wall_time,
            },
        ),
        Command::GenData {
            common,
            out,
            records,
            seed,
            verify,
        } => commands::gen_data(
            &load(&common)?,
            &GenDataArgs {
                out: &out,
                records,
                seed,
                verify,
            },
        ),
        Command::Train {
            common,
            data,
            out,
            hidden,
            epochs,
            sweep,
            curve,
        } => commands::train(
            &load(&common)?,
            &TrainArgs {
                data: &data,
                out: &out,
                hidden,
                epochs,
                sweep,
                curve: curve.as_deref(),
                with_wall_time: !common.no_wall_time,
            },
        ),
        Command::Bench(BenchCommand::Solvers {
            common,
            out,
            instances,
            assert_jbar_max,
            assert_jbar_min,
        }) => commands::bench_solvers(
            &load(&common)?,
            &BenchSolversArgs {
                out_dir: &out,
                instances,
                assert_jbar_max,
                assert_jbar_min,
                with_wall_time: !common.no_wall_time,
            },
        ),
        Command::Bench(BenchCommand::Closedloop { common, out, model }) => commands::bench_closed_loop(
            &load(&common)?,
            &BenchClosedLoopArgs {
                out_dir: &out,
                model: model.as_deref(),
                with_wall_time: !common.no_wall_time,
            },
        ),
        Command::Config(ConfigCommand::Echo { config }) => {
            let mut doc = ConfigDocument::load(config.as_deref())?;
            doc.apply_seed_env()?;
            doc.validate()?;
            doc.canonical()
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hierax: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
