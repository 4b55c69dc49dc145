use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rkld_workbench::pipeline::{cmd_eval, cmd_synth, cmd_train, cmd_unlearn};
use rkld_workbench::report::{cmd_report, Report};
use rkld_workbench::{run_all, ExperimentConfig, RunDir, TrainStage};

#[derive(Parser)]
#[command(
    name = "rkld-workbench",
    about = "Run unlearning experiments on the synthetic profile corpus"
)]
struct Cli {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    All,
    Finetune,
    Retrain,
    Strengthen,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default config as JSON.
    Config,
    /// Generate the corpus for each seed.
    Synth,
    /// Train the original, reference and strengthened models.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        stage: Stage,
    },
    /// Run every configured unlearning method.
    Unlearn,
    /// Evaluate all checkpoints.
    Eval,
    /// Aggregate evaluations into report.csv and report.json.
    Report,
    /// All stages in order.
    Run,
}

fn print_summary(report: &Report) {
    println!(
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "model", "F-Qual", "M-Util", "ROUGE-L", "Prob", "Leak"
    );
    for m in report.baseline_summary.iter().chain(&report.summary) {
        println!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.3}",
            m.method, m.forget_quality, m.model_utility, m.forget_rouge_l, m.forget_prob, m.leakage
        );
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
        cfg.name = format!("{}-seed{seed}", cfg.name);
    }
    let dir = RunDir::new(&cli.out, &cfg);
    match cli.command {
        Command::Config => println!("{}", cfg.to_json()),
        Command::Synth => cmd_synth(&cfg, &dir)?,
        Command::Train { stage } => {
            let stage = match stage {
                Stage::All => TrainStage::All,
                Stage::Finetune => TrainStage::Finetune,
                Stage::Retrain => TrainStage::Retrain,
                Stage::Strengthen => TrainStage::Strengthen,
            };
            cmd_train(&cfg, &dir, stage)?
        }
        Command::Unlearn => cmd_unlearn(&cfg, &dir)?,
        Command::Eval => cmd_eval(&cfg, &dir)?,
        Command::Report => print_summary(&cmd_report(&cfg, &dir)?),
        Command::Run => print_summary(
            &run_all(&cfg, &dir).with_context(|| format!("run {}", dir.root.display()))?,
        ),
    }
    Ok(())
}
