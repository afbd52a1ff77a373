use clap::{Parser, Subcommand};
use sdegeo::commands::{run, RunError};
use sdegeo::config::{load_config, Command, Overrides, SCHEMA};
use std::path::PathBuf;
use std::process::ExitCode;

/// Connections, curvature and derivative flows of SDEs on manifolds.
///
/// Exit codes: 0 all checks pass, 1 a check failed or was not applicable,
/// 2 configuration error, 3 runtime or numerical error.
#[derive(Parser, Debug)]
#[command(name = "sdegeo", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run whatever `command` the config names.
    Run(Args),
    /// Tensor components at the listed points.
    Tensors(Args),
    /// Geometry identity suite.
    Verify(Args),
    /// Simulate paths and summarize.
    Simulate(Args),
    /// Monte Carlo study named by `study`.
    Estimate(Args),
    /// Print the configuration JSON Schema.
    Schema,
}

#[derive(clap::Args, Debug)]
struct Args {
    /// JSON configuration file.
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-path CSV here.
    #[arg(long)]
    dump_paths: Option<PathBuf>,
    /// Suppress the summary table.
    #[arg(long, short)]
    quiet: bool,
}

fn write(path: &str, body: &str) -> Result<(), RunError> {
    std::fs::write(path, body).map_err(|e| RunError::Runtime(format!("cannot write {path}: {e}")))
}

fn execute(args: Args, command: Option<Command>) -> Result<i32, RunError> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RunError::Runtime(format!("thread pool: {e}")))?;
    }
    let mut cfg = load_config(&args.config)?;
    cfg.apply(&Overrides {
        command,
        seed: args.seed,
        paths: args.paths,
        dt: args.dt,
        t: args.t,
        out: args.out.map(|p| p.display().to_string()),
        dump_paths: args.dump_paths.map(|p| p.display().to_string()),
    });
    let outcome = run(&cfg)?;
    if !args.quiet {
        print!("{}", outcome.summary);
    }
    let body = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
    match &cfg.output.report {
        Some(path) => write(path, &body)?,
        None if args.quiet => {}
        None => println!("{body}"),
    }
    if let (Some(path), Some(csv)) = (&cfg.output.paths_csv, &outcome.csv) {
        write(path, csv)?;
    }
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, command) = match cli.command {
        Cmd::Schema => {
            println!("{SCHEMA}");
            return ExitCode::SUCCESS;
        }
        Cmd::Run(a) => (a, None),
        Cmd::Tensors(a) => (a, Some(Command::Tensors)),
        Cmd::Verify(a) => (a, Some(Command::Verify)),
        Cmd::Simulate(a) => (a, Some(Command::Simulate)),
        Cmd::Estimate(a) => (a, Some(Command::Estimate)),
    };
    match execute(args, command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
