use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dfl_sim::cli::{
    emit_table, load_configs, rounds_to_csv, run_grid, rows_to_csv, GridRow, NamedConfig, TableSpec, EXIT_CONFIG,
    EXIT_OK, EXIT_RUN_FAILURES,
};
use dfl_sim::metrics::summarize;
use dfl_sim::protocol::{run_experiment_with, workers_from_env};
use dfl_sim::SimError;

/// Byzantine-robust decentralized federated learning simulator.
///
/// Worker threads: set DFL_WORKERS (default: one per core).
#[derive(Parser)]
#[command(name = "dfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (every sweep entry, if the file has a [sweep]).
    Run {
        config: PathBuf,
        /// Write the result CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a per-round trace.
        #[arg(long)]
        rounds_csv: Option<PathBuf>,
    },
    /// Run every config in a directory over several seeds.
    Grid {
        config_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a result CSV as a rules-by-attacks table.
    Table {
        csv: PathBuf,
        #[arg(long)]
        spec: PathBuf,
    },
    /// Parse and validate a config file or directory.
    Validate { config: PathBuf },
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), SimError> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load(path: &Path) -> Result<Vec<NamedConfig>, u8> {
    load_configs(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        EXIT_CONFIG as u8
    })
}

fn run(command: Command) -> Result<u8, u8> {
    let io_fail = |e: SimError| {
        eprintln!("error: {e}");
        EXIT_RUN_FAILURES as u8
    };
    match command {
        Command::Validate { config } => {
            let configs = load(&config)?;
            for c in &configs {
                println!("ok {} {}", c.config.hash(), c.name);
            }
            Ok(EXIT_OK as u8)
        }
        Command::Run {
            config,
            out,
            rounds_csv,
        } => {
            let configs = load(&config)?;
            let mut rows = Vec::new();
            let mut traces = String::new();
            let mut failed = false;
            for named in &configs {
                let record = run_experiment_with(&named.config, workers_from_env()).and_then(|r| {
                    if traces.is_empty() {
                        traces = rounds_to_csv(&r.reports);
                    }
                    summarize(&r)
                });
                if let Err(e) = &record {
                    eprintln!("error: {}: {e}", named.name);
                    failed = true;
                }
                rows.push(GridRow::from_result(named, named.config.seed, &record));
            }
            emit(&rows_to_csv(&rows), out.as_deref()).map_err(io_fail)?;
            if let Some(path) = rounds_csv {
                std::fs::write(path, traces).map_err(|e| io_fail(e.into()))?;
            }
            Ok(if failed { EXIT_RUN_FAILURES } else { EXIT_OK } as u8)
        }
        Command::Grid {
            config_dir,
            seeds,
            out,
        } => {
            let configs = load(&config_dir)?;
            let outcome = run_grid(&configs, seeds, workers_from_env());
            emit(&outcome.to_csv(), out.as_deref()).map_err(io_fail)?;
            if outcome.failures > 0 {
                eprintln!("{} run(s) failed", outcome.failures);
            }
            Ok(outcome.exit_code() as u8)
        }
        Command::Table { csv, spec } => {
            let read = |p: &Path| {
                std::fs::read_to_string(p).map_err(|e| {
                    eprintln!("error: {}: {e}", p.display());
                    EXIT_CONFIG as u8
                })
            };
            let spec = TableSpec::parse(&read(&spec)?).map_err(|e| {
                eprintln!("error: {e}");
                EXIT_CONFIG as u8
            })?;
            let table = emit_table(&read(&csv)?, &spec).map_err(|e| {
                eprintln!("error: {e}");
                EXIT_CONFIG as u8
            })?;
            print!("{table}");
            Ok(EXIT_OK as u8)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) | Err(code) => ExitCode::from(code),
    }
}
