use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use lpsv_cli::run::{run, Overrides, Subcommand, EXIT_CONFIG};

#[derive(Debug, Parser)]
#[command(
    name = "lpsv",
    version,
    about = "Large-portfolio stochastic-volatility lab"
)]
struct Cli {
    #[arg(value_enum)]
    command: Subcommand,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output_dir` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed, overriding `monte_carlo.base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of common-noise scenarios.
    #[arg(long)]
    scenarios: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let ov = Overrides {
        out: cli.out,
        seed: cli.seed,
        scenarios: cli.scenarios,
        threads: cli.threads,
    };
    let outcome = run(cli.command, &cli.config, &ov);
    for line in &outcome.stdout {
        println!("{line}");
    }
    if let Some(err) = &outcome.manifest.error {
        eprintln!(
            "{}",
            serde_json::to_string(err).expect("error record serializes")
        );
    }
    ExitCode::from(outcome.exit_code as u8)
}
