use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use covnoise::data::DefaultTransport;
use covnoise::trainer::load_checkpoint;
use covnoise_cli::{cmd_analyze, cmd_fetch, cmd_suppress, cmd_synth, cmd_train, CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "covnoise", version, about = "SGD noise covariance versus Hessian alignment")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Trained checkpoint for analyze and suppress.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replace every seed in the config.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    Fetch,
    Train,
    Analyze,
    Suppress,
    Synth,
}

fn run(args: &Args) -> CliResult<()> {
    let path = args.config.as_ref().ok_or(CliError::MissingArgument("--config"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = args.seed_override {
        cfg.override_seed(s);
    }
    let checkpoint = || -> CliResult<_> {
        let p = args.checkpoint.as_ref().ok_or(CliError::MissingArgument("--checkpoint"))?;
        Ok(load_checkpoint::<f64>(p)?)
    };
    let artifacts = match args.command {
        Command::Fetch => cmd_fetch(&cfg, &DefaultTransport)?.artifacts,
        Command::Train => cmd_train(&cfg)?.1.artifacts,
        Command::Analyze => cmd_analyze(&cfg, &checkpoint()?)?.outcome.artifacts,
        Command::Suppress => cmd_suppress(&cfg, &checkpoint()?)?.1.artifacts,
        Command::Synth => cmd_synth(&cfg)?.artifacts,
    };
    artifacts.write_all(&args.out)?;
    for (name, _) in &artifacts.files {
        log::info!("wrote {}", args.out.join(name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
