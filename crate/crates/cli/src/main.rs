use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prunelab::{CliError, CliResult, ExperimentConfig, Pipeline};

#[derive(Parser, Debug)]
#[command(name = "prunelab", version, about = "Calibration-language pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Added to every seed in the config.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write calibration and validation corpora.
    Gen,
    /// Initialise the base model and prune it for every plan and seed.
    Prune,
    /// Perplexity, pruning error and SNR reports.
    Eval,
    /// LSAR, mask IoU and LAPE report.
    Analyze,
    /// gen, prune, eval and analyze in sequence.
    All,
}

fn init_logging() {
    let level = std::env::var("PRUNELAB_LOG").unwrap_or_else(|_| "warn".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
}

fn set_jobs(jobs: Option<usize>) -> CliResult<()> {
    match jobs {
        None => Ok(()),
        Some(0) => Err(CliError::Config("--jobs must be ≥ 1".into())),
        Some(1) => {
            prunelab_core::par::set_sequential(true);
            Ok(())
        }
        Some(n) => {
            #[cfg(feature = "parallel")]
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(format!("cannot start {n} workers: {e}")))?;
            #[cfg(not(feature = "parallel"))]
            log::warn!("built without the parallel feature; ignoring --jobs {n}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    set_jobs(cli.jobs)?;
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let config = ExperimentConfig::load(&path)?.with_seed_offset(cli.seed_offset);
    let pipeline = Pipeline::new(config, cli.out);
    log::info!("config hash {}", pipeline.layout.hash);
    match cli.command {
        Command::Gen => pipeline.gen(),
        Command::Prune => pipeline.prune(),
        Command::Eval => pipeline.eval().map(drop),
        Command::Analyze => pipeline.analyze().map(drop),
        Command::All => pipeline.all().map(drop),
    }
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("prunelab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
