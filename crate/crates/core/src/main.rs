use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use robust_proxy::harness::{write_report, ExperimentConfig, Pipeline, Stage};

/// Robust proxy learning experiments from declarative TOML configs.
#[derive(Parser)]
#[command(name = "robust-proxy", version, about)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "configs/desk.toml")]
    config: PathBuf,
    /// Overrides the root seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory of the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Keep partial stage artifacts and continue from them.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the standard, surrogate and adversarially trained models.
    Pretrain,
    /// Distill robust/non-robust channel masks on the adversarial model.
    Distill,
    /// Optimize class-wise robust perturbations.
    Crp,
    /// Build the robust proxy bank.
    Proxies,
    /// Fine-tune the adversarial model with the proxy loss.
    Finetune,
    /// Score every model against the attack suite.
    Attack,
    /// Gradient-norm, similarity and ablation analyses.
    Analyze,
    /// Rebuild the report from cached artifacts only.
    Report,
    /// Every stage, then the report.
    Run,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    let mut pipeline = Pipeline::new(cfg, cli.resume)?;
    let target = match cli.command {
        Command::Pretrain => Stage::Pretrain,
        Command::Distill => Stage::Distill,
        Command::Crp => Stage::Crp,
        Command::Proxies => Stage::Proxies,
        Command::Finetune => Stage::Finetune,
        Command::Attack => Stage::Attack,
        Command::Analyze => Stage::Analyze,
        Command::Report | Command::Run => {
            if matches!(cli.command, Command::Report) {
                pipeline = pipeline.read_only();
            }
            pipeline.run_all()?;
            let report = write_report(&pipeline)?;
            println!("{}", pipeline.run_dir().join("report.txt").display());
            if !report.all_sane() {
                error!("gradient-obfuscation checks failed; see the report");
                return Ok(ExitCode::from(2));
            }
            return Ok(ExitCode::SUCCESS);
        }
    };
    pipeline.run_to(target)?;
    for r in pipeline.records().values() {
        println!(
            "{:<9} {} {}",
            r.stage.name(),
            if r.cached { "cached  " } else { "computed" },
            r.dir.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}
