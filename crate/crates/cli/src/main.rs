use clap::{Parser, ValueEnum};
use geoclose::GeoError;
use geoclose_cli::{load_config, run, verify, write_error, Command, RunContext};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sub {
    Integrate,
    Connect,
    Close,
    Verify,
    Sweep,
}

/// Conformal closing of geodesic orbits.
#[derive(Debug, Parser)]
#[command(name = "geoclose", version)]
struct Args {
    #[arg(value_enum)]
    command: Sub,
    /// JSON configuration file. Not used by `verify`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of every randomized choice.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Also write trajectory CSV files.
    #[arg(long)]
    emit_trajectories: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GEOCLOSE_LOG", "warn")).init();
    let args = Args::parse();
    let command = match args.command {
        Sub::Integrate => Command::Integrate,
        Sub::Connect => Command::Connect,
        Sub::Close => Command::Close,
        Sub::Verify => Command::Verify,
        Sub::Sweep => Command::Sweep,
    };
    let ctx = RunContext { out_dir: args.out_dir, emit_trajectories: args.emit_trajectories };

    let config = if command == Command::Verify {
        None
    } else {
        let Some(path) = &args.config else {
            eprintln!("error: --config is required for `{}`", command.name());
            return ExitCode::from(2);
        };
        match load_config(path, args.seed) {
            Ok(c) => Some(c),
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(2);
            }
        }
    };
    let result = match &config {
        Some(c) => run(command, c, &ctx),
        None => verify(&ctx),
    };
    match result {
        Ok(outcome) => {
            if outcome.exit_code() != 0 {
                eprintln!("verification failed; see {}", ctx.out_dir.join("report.json").display());
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Err(w) = write_error(&ctx, &e) {
                eprintln!("error: could not write error record: {w}");
            }
            match e.root() {
                GeoError::Config(_) | GeoError::InvalidInput(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
