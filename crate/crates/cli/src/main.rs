use clap::{Parser, Subcommand};
use kinetics_cli::{parse_config, run, Experiment};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kinetics", version, about = "Kinetic experiments in an expanding ball")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; falls back to KINETICS_THREADS.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the preset names.
    ListExperiments,
}

const USAGE: u8 = 2;
const FAILED_CHECKS: u8 = 1;
const RUN_ERROR: u8 = 3;

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, String> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("KINETICS_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("KINETICS_THREADS: expected a non-negative integer, got `{v}`")),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListExperiments => {
            let mut stdout = std::io::stdout().lock();
            for e in Experiment::ALL {
                let _ = writeln!(stdout, "{:<24} {}", e.name(), e.summary());
            }
            ExitCode::SUCCESS
        }
        Command::Run { config, out, threads } => {
            let threads = match thread_count(threads) {
                Ok(t) => t,
                Err(msg) => {
                    eprintln!("error: {msg}");
                    return ExitCode::from(USAGE);
                }
            };
            if let Some(n) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: thread pool: {e}");
                    return ExitCode::from(RUN_ERROR);
                }
            }
            let text = match std::fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: reading {}: {e}", config.display());
                    return ExitCode::from(USAGE);
                }
            };
            let cfg = match parse_config(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {}: {e}", config.display());
                    return ExitCode::from(USAGE);
                }
            };
            match run(&cfg, out.as_deref()) {
                Ok(manifest) => {
                    // a closed pipe must not turn a passing run into a failure
                    let mut stdout = std::io::stdout().lock();
                    for c in &manifest.checks {
                        let _ = writeln!(stdout, "{}", c.row());
                    }
                    let dir = out.as_ref().unwrap_or(&cfg.output);
                    let _ = writeln!(stdout, "wrote {} files to {}", manifest.files.len(), dir.display());
                    if manifest.passed() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(FAILED_CHECKS)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(RUN_ERROR)
                }
            }
        }
    }
}
