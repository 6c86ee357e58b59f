use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use svae_core::attribution::{Method, TargetSpec};
use svae_core::mlp::Activation;
use svae_core::models::ModelKind;

mod commands;
mod source;

use source::DataArgs;

#[derive(Parser, Debug)]
#[command(name = "svae", version, about = "Supervised VAE toolkit: train, evaluate and probe learned invariances")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
enum Command {
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Report test accuracy and the reconstruction term of a checkpoint.
    Eval(EvalArgs),
    /// Retention of predictions as the nuisance code is resampled at growing scales.
    Invariance(InvarianceArgs),
    /// Decode a grid of offsets along two nuisance dimensions.
    Explore(ExploreArgs),
    /// Feature attribution for the classifier or the latent divergence.
    Explain(ExplainArgs),
    /// Move the classifier code of an image towards other classes.
    Counterfactual(CounterfactualArgs),
    /// Serve a checkpoint over the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Serialize)]
struct OutputArgs {
    /// Directory for this invocation's artifacts (default: runs/<command>-<unix time>).
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    output: OutputArgs,
    #[arg(long, default_value = "svae", value_parser = parse_kind)]
    model: ModelKind,
    /// Convex weight between the generative and discriminative bounds, in (0, 1).
    #[arg(long, default_value_t = 0.9, value_parser = parse_beta)]
    beta: f64,
    /// Weight of the latent classifier term.
    #[arg(long, default_value_t = 6000.0, value_parser = parse_positive)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-3, value_parser = parse_positive)]
    lr: f64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = 0, conflicts_with = "seeds")]
    seed: u64,
    /// Comma-separated seeds; trains once per seed and writes mean and std.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    seeds: Vec<u64>,
    /// Latent dimensions read by the classifier.
    #[arg(long, default_value_t = 10)]
    d1: usize,
    /// Nuisance latent dimensions.
    #[arg(long, default_value_t = 5)]
    d2: usize,
    #[arg(long, value_delimiter = ',', default_value = "512,256")]
    enc_hidden: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "256,512")]
    dec_hidden: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "128")]
    cls_hidden: Vec<usize>,
    #[arg(long, default_value = "silu", value_parser = parse_activation)]
    activation: Activation,
    /// Monte Carlo samples for the posterior classifier during evaluation.
    #[arg(long, default_value_t = 32)]
    eval_samples: usize,
    /// Checkpoint path (default: <run dir>/model.svae; with --seeds, one per seed).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    /// Monte Carlo samples per image (default: the checkpoint's setting).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct InvarianceArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1.0,2.0,5.0")]
    sigmas: Vec<f64>,
    /// Test images used, from the start of the split.
    #[arg(long, default_value_t = 1000)]
    images: usize,
    /// Nuisance draws per image and scale.
    #[arg(long, default_value_t = 1)]
    draws: usize,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct ExploreArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    /// Test image index.
    #[arg(long)]
    index: usize,
    /// Two nuisance dimensions, counted from 0 within z₂.
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    step: f64,
    #[arg(long, default_value_t = 2)]
    radius: usize,
}

#[derive(Args, Debug, Serialize)]
struct ExplainArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    #[arg(long)]
    index: usize,
    /// saliency, ixg, ig or gradshap.
    #[arg(long, value_parser = parse_method)]
    #[serde(serialize_with = "display")]
    method: Method,
    /// classifier:<c> or divergence:k=<1|2>.
    #[arg(long, value_parser = parse_target)]
    #[serde(serialize_with = "display")]
    target: TargetSpec,
    /// Reference test image; required for divergence targets.
    #[arg(long)]
    ref_index: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct CounterfactualArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    #[arg(long)]
    index: usize,
    /// Target class (default: every class in order).
    #[arg(long)]
    target: Option<usize>,
    #[arg(long, default_value_t = svae_core::invariance::COUNTERFACTUAL_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = svae_core::invariance::COUNTERFACTUAL_STEP)]
    step_size: f64,
}

#[derive(Args, Debug, Serialize)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

fn display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn parse_beta(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("β must lie in (0, 1), got {v}"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a positive number, got {v}"))
    }
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: svae_core::Error| e.to_string())
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    match s {
        "relu" => Ok(Activation::Relu),
        "softplus" => Ok(Activation::Softplus),
        "tanh" => Ok(Activation::Tanh),
        "silu" => Ok(Activation::Silu),
        _ => Err(format!("unknown activation {s:?} (expected relu, softplus, tanh or silu)")),
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: svae_core::Error| e.to_string())
}

fn parse_target(s: &str) -> Result<TargetSpec, String> {
    s.parse().map_err(|e: svae_core::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
