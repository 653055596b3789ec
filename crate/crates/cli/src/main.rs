mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use osscl::checkpoint::WeightSet;
use osscl::features::FeatureMode;

/// Machine-ID anomalous sound detection with noise-supervised contrastive learning.
#[derive(Debug, Parser)]
#[command(name = "osscl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model on the train split of a corpus.
    Train(TrainArgs),
    /// Score the test split with a checkpoint and write the metric report.
    Eval(EvalArgs),
    /// Print the anomaly score of individual WAV files.
    Score(ScoreArgs),
    /// Write a synthetic corpus in the DCASE directory layout.
    Synth(SynthArgs),
    /// Train and evaluate one model per perturbation-head reduction.
    AblateFph(AblateArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run config; omitted keys take the reference Log-Mel settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus root with `<type>/{train,test}/*.wav`.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's feature_mode.
    #[arg(long, value_parser = parse_feature)]
    feature: Option<FeatureMode>,
    /// Overrides train.seed; `OSSCL_SEED` is used when neither is set.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides train.batch_size.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "ema", value_parser = parse_weights)]
    weights: WeightSet,
    /// FPR limit of the partial AUC.
    #[arg(long, default_value_t = osscl::eval::DEFAULT_PAUC_P)]
    p: f64,
    /// Average the summary row over IDs instead of over machine types.
    #[arg(long)]
    summary_over_ids: bool,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip to score; repeat for several.
    #[arg(long, required = true)]
    wav: Vec<PathBuf>,
    /// Claimed machine, e.g. `fan/1` or `fan/id_01`.
    #[arg(long)]
    id: String,
    #[arg(long, default_value = "ema", value_parser = parse_weights)]
    weights: WeightSet,
    /// Where to write the effective config; nothing is written without it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    ids: usize,
    /// Normal train clips per ID.
    #[arg(long, default_value_t = 100)]
    clips_per_id: usize,
    /// Test clips per ID, half of them anomalous; defaults to 40% of the train count.
    #[arg(long)]
    test_clips_per_id: Option<usize>,
    #[arg(long, default_value_t = osscl::corpus::CLIP_SAMPLES)]
    clip_samples: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated list; `none` removes the head.
    #[arg(long, value_delimiter = ',', default_value = "none,128,64,32,16,8,4", value_parser = parse_reduction)]
    reductions: Vec<Option<usize>>,
}

fn parse_feature(s: &str) -> Result<FeatureMode, String> {
    match s {
        "logmel" => Ok(FeatureMode::Logmel),
        "tfst" => Ok(FeatureMode::Tfst),
        _ => Err(format!("expected logmel or tfst, got {s:?}")),
    }
}

fn parse_weights(s: &str) -> Result<WeightSet, String> {
    s.parse().map_err(|e: osscl::Error| e.to_string())
}

fn parse_reduction(s: &str) -> Result<Option<usize>, String> {
    if s == "none" {
        return Ok(None);
    }
    match s.parse::<usize>() {
        Ok(r) if r > 0 => Ok(Some(r)),
        _ => Err(format!("reduction must be `none` or a positive integer, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Score(a) => commands::score(a),
        Command::Synth(a) => commands::synth(a),
        Command::AblateFph(a) => commands::ablate_fph(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("osscl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
