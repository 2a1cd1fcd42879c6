use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use capdet::config::SEED_ENV;
use capdet::{cmd_eval, cmd_gen_data, cmd_report, cmd_train, CliError, RunConfig};
use clap::{Args, Parser, Subcommand};

/// Synthetic-image detection posed as captioning.
#[derive(Parser)]
#[command(name = "capdet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let env = std::env::var(SEED_ENV).ok();
        RunConfig::load(self.config.as_deref(), &self.overrides, env.as_deref())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark corpus and its manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Verify an existing corpus instead of writing one.
        #[arg(long)]
        check: bool,
    },
    /// Train one model and write its run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate checkpoints on every test subset.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (defaults to the configured run_dir).
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Merge evaluation results of several directories into one table.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::GenData { config, check } => cmd_gen_data(&config.resolve()?, check, &mut stdout),
        Command::Train { config } => cmd_train(&config.resolve()?, &mut stdout).map(drop),
        Command::Eval {
            config,
            out,
            checkpoints,
        } => {
            let cfg = config.resolve()?;
            let dir = out.unwrap_or_else(|| cfg.run_dir.clone());
            cmd_eval(&cfg, &checkpoints, &dir, &mut stdout).map(drop)
        }
        Command::Report { dirs, out } => {
            let (_, table) = cmd_report(&dirs, &mut stdout)?;
            if let Some(path) = out {
                std::fs::write(&path, table).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            }
            Ok(())
        }
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
