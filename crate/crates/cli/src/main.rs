use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use horizon_core::pipeline::{self, configure_threads, PipelineConfig, PipelineError};

#[derive(Parser, Debug)]
#[command(name = "horizon", version, about = "Hyperbolic clinical-concept graphs for next-visit prediction")]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, propagated to every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded execution for bit-identical artifacts.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write a synthetic cohort, its planted rules and the ontology.
    GenSynthetic,
    /// Split the cohort by patient and filter the training split.
    Split,
    /// Build the concept graph from the training split.
    BuildGraph,
    /// Train embeddings on the graph.
    Train,
    /// Forecast validation and test visits.
    Predict,
    /// Score test predictions with thresholds tuned on validation.
    Evaluate,
    /// Every stage in order.
    RunAll,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn resolve(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.deterministic |= cli.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = resolve(cli)?;
    configure_threads(cfg.deterministic);
    log::info!("config {}", cfg.hash());
    match cli.command {
        Command::GenSynthetic => pipeline::stage_gen_synthetic(&cfg)?,
        Command::Split => {
            let m = pipeline::stage_split(&cfg)?;
            log::info!("split {} / {} / {} patients", m.train.len(), m.val.len(), m.test.len());
        }
        Command::BuildGraph => {
            let g = pipeline::stage_build_graph(&cfg)?;
            log::info!("graph with {} concepts and {} edges", g.vocab().len(), g.edges().len());
        }
        Command::Train => {
            let r = pipeline::stage_train(&cfg)?;
            log::info!("trained {} steps, curvature {:.4}", r.steps, r.final_curvature);
        }
        Command::Predict => {
            let s = pipeline::stage_predict(&cfg)?;
            log::info!("{} forecasts, {} degraded", s.visits, s.degraded);
        }
        Command::Evaluate => {
            let r = pipeline::stage_evaluate(&cfg)?;
            log::info!("evaluated {} visits", r.n_visits);
        }
        Command::RunAll => {
            let r = pipeline::run_all(&cfg)?;
            log::info!("evaluated {} visits", r.n_visits);
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
