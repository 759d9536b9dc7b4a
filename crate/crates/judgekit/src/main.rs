//! Command-line surface: one subcommand per pipeline stage.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use judgekit::commands::{
    cmd_best_of_n, cmd_calibrate, cmd_evaluate, cmd_generate, cmd_rate, cmd_refine, cmd_score,
    cmd_select, cmd_train_judge, CommandCtx, ScoreMode,
};
use judgekit::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "judgekit",
    version,
    about = "Generate quality scores, train a judge, and apply selective policies"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Run configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to output_dir from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the global seed (also seeds judge training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the cache root directory.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Print planned gateway call counts and exit without side effects.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample model responses for an instruction set.
    Generate {
        #[arg(long)]
        instructions: PathBuf,
    },
    /// Self-evaluate and cosine-score sampled responses.
    Rate {
        #[arg(long)]
        instructions: PathBuf,
        #[arg(long)]
        responses: PathBuf,
    },
    /// Search the mixing weight and build the training set.
    Calibrate {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        dev: PathBuf,
    },
    /// Train the judge on a calibrated training set.
    TrainJudge {
        #[arg(long)]
        training: PathBuf,
        #[arg(long)]
        instructions: PathBuf,
        #[arg(long)]
        responses: PathBuf,
    },
    /// Score responses with the judge or a training-free baseline.
    Score {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        instructions: PathBuf,
        #[arg(long, value_enum)]
        mode: ScoreMode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Partition a score file at the accept threshold.
    Select {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Refine below-threshold responses in two stages.
    Refine {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        instructions: PathBuf,
    },
    /// Sample N responses per instruction and keep the judge's pick.
    BestOfN {
        #[arg(long)]
        instructions: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Correlations, ranking, and risk-coverage against grader scores.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();

    let config_path = cli
        .global
        .config
        .as_deref()
        .context("--config <path> is required")?;
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = cli.global.seed {
        config.seed = seed;
        config.judge.seed = seed;
    }
    if let Some(cache) = &cli.global.cache {
        config.cache_root = Some(cache.clone());
    }
    let out_dir = match cli.global.out.as_ref().or(config.output_dir.as_ref()) {
        Some(dir) => dir.clone(),
        None => bail!("no output directory: pass --out or set output_dir in the config"),
    };
    config.output_dir = Some(out_dir.clone());
    config.validate()?;

    let ctx = CommandCtx {
        config: &config,
        out_dir: &out_dir,
        dry_run: cli.global.dry_run,
    };

    match &cli.command {
        Command::Generate { instructions } => cmd_generate(&ctx, instructions)?,
        Command::Rate {
            instructions,
            responses,
        } => cmd_rate(&ctx, instructions, responses)?,
        Command::Calibrate { ratings, dev } => cmd_calibrate(&ctx, ratings, dev)?,
        Command::TrainJudge {
            training,
            instructions,
            responses,
        } => cmd_train_judge(&ctx, training, instructions, responses)?,
        Command::Score {
            responses,
            instructions,
            mode,
            checkpoint,
        } => cmd_score(&ctx, checkpoint.as_deref(), responses, instructions, *mode)?,
        Command::Select { scores } => cmd_select(&ctx, scores)?,
        Command::Refine {
            scores,
            responses,
            instructions,
        } => cmd_refine(&ctx, scores, responses, instructions)?,
        Command::BestOfN {
            instructions,
            checkpoint,
            n,
        } => cmd_best_of_n(&ctx, instructions, checkpoint, *n)?,
        Command::Evaluate { scores, gold } => cmd_evaluate(&ctx, scores, gold)?,
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
