use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ehr_rewrite::experiment::AblationMode;
use ehr_rewrite_cli::{run_stages, CliError, Overrides, RunConfig, Stage, SweepAxis};

/// Run pipeline stages in a workdir. `all` runs every stage through evaluate.
#[derive(Parser, Debug)]
#[command(name = "ehr-rewrite", version)]
struct Args {
    /// Stages to run in order: gen-data, build-rewrites, train-scorer,
    /// build-drw, train-rewriter, train-predictor, kl-align, inoculate,
    /// evaluate, sweep, or all.
    #[arg(required = true)]
    stages: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workdir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["mor", "ra", "los", "custom"])]
    task: Option<String>,
    #[arg(long)]
    mode: Option<AblationMode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    sweep: Option<SweepAxis>,
}

fn parse_stages(names: &[String], cfg: &RunConfig) -> Result<Vec<Stage>, CliError> {
    let mut out = Vec::new();
    for n in names {
        if n == "all" {
            out.extend(Stage::PIPELINE.into_iter().filter(|&s| s != Stage::GenData || cfg.cohort.is_none()));
            continue;
        }
        let s = <Stage as clap::ValueEnum>::from_str(n, false).map_err(|_| CliError::config("stage", format!("unknown stage `{n}`")))?;
        out.push(s);
    }
    Ok(out)
}

fn run(args: Args) -> Result<(), CliError> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(&Overrides {
        workdir: args.workdir,
        seed: args.seed,
        task: args.task,
        mode: args.mode,
        alpha: args.alpha,
        lambda: args.lambda,
        sweep: args.sweep,
    })?;
    let stages = parse_stages(&args.stages, &cfg)?;
    for (stage, outcome) in run_stages(&stages, &cfg)? {
        println!("{stage}: {outcome:?}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
