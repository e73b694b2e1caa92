use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ilens::{CliError, Context, RunConfig, Stage, Step, StepOptions};

/// Train reference and target models and measure how invariances are shared,
/// forgotten and learned between them.
#[derive(Parser, Debug)]
#[command(name = "ilens", version)]
struct Cli {
    /// Pipeline steps, run in the order given.
    #[arg(value_enum, required = true)]
    steps: Vec<Step>,
    /// Run configuration (JSON).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, short, default_value_t = 0)]
    jobs: usize,
    /// Quick metric protocol: n=64, k=1, 20 inversion steps.
    #[arg(long)]
    fast: bool,
    /// Stage to train, or the target model's stage for analysis steps.
    #[arg(long, value_enum)]
    stage: Option<Stage>,
    /// Target checkpoint directory, overriding `--stage`.
    #[arg(long)]
    ft: Option<PathBuf>,
    /// Reference checkpoint directory.
    #[arg(long)]
    pt: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Run directory for a config-free `report`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.steps == [Step::Report] && cli.config.is_none() {
        let dir = cli.run_dir.ok_or_else(|| CliError::Other("report needs --config or --run-dir".into()))?;
        return ilens::report::write_report(&dir);
    }
    let path = cli.config.ok_or_else(|| CliError::Other("--config is required".into()))?;
    let mut config = RunConfig::load(&path)?;
    if let Some(dir) = cli.output_dir.or(cli.run_dir) {
        config.output_dir = dir;
    }
    let ctx = Context::new(config, cli.jobs, cli.fast);
    let opts = StepOptions {
        stage: cli.stage,
        ft: cli.ft,
        pt: cli.pt,
    };
    for step in cli.steps {
        ctx.run(step, &opts)?;
        eprintln!("ilens: {} done", step.name());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
