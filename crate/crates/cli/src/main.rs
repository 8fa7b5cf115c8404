mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pearl_core::PearlError;

#[derive(Parser)]
#[command(name = "pearl", version, about = "Pathway-level spatial transcriptomics pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Seed overriding the configured one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic spatial dataset or survival cohort.
    Synth(commands::SynthArgs),
    /// Filter, normalize, smooth and select highly variable genes.
    Preprocess(commands::ConfigArgs),
    /// Score every pathway in every spot.
    ScorePathways(commands::ScoreArgs),
    /// Stage 1: contrastive alignment of image and pathway encoders.
    TrainContrastive(commands::ConfigArgs),
    /// Stage 2: prediction heads on the frozen image encoder.
    TrainHeads(commands::HeadsArgs),
    /// Image-only prediction of pathway scores and gene expression.
    Predict(commands::PredictArgs),
    /// Compare predictions with ground truth.
    Evaluate(commands::EvaluateArgs),
    /// Train an attention-pooled Cox head on spot embeddings.
    SurvivalTrain(commands::SurvivalArgs),
    /// Score a trained Cox head with the concordance index.
    SurvivalEval(commands::SurvivalEvalArgs),
    /// Check every differentiable operation against finite differences.
    Gradcheck,
    /// Slide-level k-fold cross-validation of the full pipeline.
    RunCv(commands::CvArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = cli.common;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    std::fs::create_dir_all(&common.out_dir)?;
    match cli.command {
        Command::Synth(a) => commands::synth(&common, a),
        Command::Preprocess(a) => commands::preprocess(&common, a),
        Command::ScorePathways(a) => commands::score_pathways(&common, a),
        Command::TrainContrastive(a) => commands::train_contrastive(&common, a),
        Command::TrainHeads(a) => commands::train_heads(&common, a),
        Command::Predict(a) => commands::predict(&common, a),
        Command::Evaluate(a) => commands::evaluate(&common, a),
        Command::SurvivalTrain(a) => commands::survival_train(&common, a),
        Command::SurvivalEval(a) => commands::survival_eval(&common, a),
        Command::Gradcheck => commands::gradcheck(&common),
        Command::RunCv(a) => commands::run_cv(&common, a),
    }
}

fn emit_error(code: &str, message: String) {
    eprintln!("{}", serde_json::json!({ "code": code, "message": message }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            emit_error("usage", e.to_string().trim_end().to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e
                .downcast_ref::<PearlError>()
                .map(PearlError::code)
                .or_else(|| e.downcast_ref::<commands::CliError>().map(commands::CliError::code))
                .unwrap_or("error");
            // library errors already print their source
            let message = if e.downcast_ref::<PearlError>().is_some() {
                e.to_string()
            } else {
                format!("{e:#}")
            };
            emit_error(code, message);
            ExitCode::FAILURE
        }
    }
}
