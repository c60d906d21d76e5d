use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pathlangevin_cli::commands;
use pathlangevin_cli::config::{parse_config, Overrides};
use pathlangevin_cli::error::{CliError, Result, EXIT_OK};

#[derive(Parser)]
#[command(name = "pathlangevin", version, about = "Langevin samplers on path space")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of independent chains.
    #[arg(long, global = true)]
    chains: Option<usize>,
    /// Treat failed condition checks as errors.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the path-space sampler.
    Sample,
    /// Run the configured reference sampler.
    Oracle,
    /// Compare a chain run against an oracle run.
    Compare {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
    },
    /// Write the centre path of the problem.
    MeanPath,
    /// Check the structural conditions.
    Validate,
}

fn plan(cli: &Cli) -> Result<pathlangevin_cli::RunPlan> {
    let Some(path) = &cli.config else {
        return Err(CliError::Config("--config is required".into()));
    };
    let overrides = Overrides { seed: cli.seed, strict: cli.strict, chains: cli.chains, out_dir: cli.out.clone() };
    parse_config(path, &overrides)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Sample => {
            let plan = plan(cli)?;
            commands::sample(&plan)?;
            println!("wrote {}", plan.out_dir.display());
        }
        Command::Oracle => {
            let plan = plan(cli)?;
            commands::oracle(&plan)?;
            println!("wrote {}", plan.out_dir.display());
        }
        Command::Compare { chain, oracle } => {
            let out = cli.out.clone().unwrap_or_else(|| chain.clone());
            let report = commands::compare(chain, oracle, &out)?;
            let worst_ks = report.marginals.iter().map(|r| r.ks).fold(0.0, f64::max);
            println!(
                "compare: {} (max z = {:.3}, max KS = {:.4}); wrote {}",
                if report.passed() { "PASS" } else { "FAIL" },
                report.max_z(),
                worst_ks,
                out.join("compare.json").display()
            );
        }
        Command::MeanPath => {
            let plan = plan(cli)?;
            let path = commands::write_mean_path(&plan)?;
            println!("wrote {}", path.display());
        }
        Command::Validate => {
            let plan = plan(cli)?;
            let (report, text) = commands::validate(&plan)?;
            print!("{text}");
            println!("{}", if report.passed() { "all checks passed" } else { "some checks failed" });
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
