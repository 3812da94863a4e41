//! `pansharp`: dataset synthesis, training, evaluation, fusion, ablations,
//! sweeps and gradient checks.
//!
//! Desk-scale defaults: K=4 layers, C=16 channels, 30 epochs, 64×64 scenes,
//! ratio 4, 4 bands. The paper-scale network is `--layers 8 --width 64
//! --epochs 100`.
//!
//! Exit codes: 0 success, 1 numeric failure (NaN, divergence, failed
//! gradient check), 2 I/O or configuration error.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pansharp::gppnn::{Ablation, InitScheme, Normalization};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

const AFTER_HELP: &str = "Desk-scale defaults: K=4, C=16, 30 epochs, 64x64 scenes, r=4, B=4.\n\
Paper scale: --layers 8 --width 64 --epochs 100.\n\
Exit codes: 0 success, 1 numeric failure, 2 I/O or configuration error.";

#[derive(Parser, Debug)]
#[command(name = "pansharp", version, about = "Gradient-projection pan-sharpening toolkit", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic reduced-resolution dataset.
    Synth(SynthArgs),
    /// Train a network and save its best-validation checkpoint.
    Train(TrainArgs),
    /// Score methods on a dataset split and write metrics.csv.
    Eval(EvalArgs),
    /// Fuse one LRMS/PAN pair with any method.
    Fuse(FuseArgs),
    /// Train the full model and the four ablations under one budget.
    Ablate(AblateArgs),
    /// Grid search over layer count and width by validation PSNR.
    Sweep(SweepArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Repeat a run from the run_config.json it wrote.
    Rerun(RerunArgs),
}

fn parse_serde<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.replace('-', "_").parse().map_err(|e: pansharp::Error| e.to_string())
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 20)]
    pub val: usize,
    #[arg(long, default_value_t = 20)]
    pub test: usize,
    /// Side of the ground-truth images.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    #[arg(long, default_value_t = 4)]
    pub bands: usize,
    /// Side of the Gaussian blur kernel (odd).
    #[arg(long, default_value_t = 7)]
    pub blur_size: usize,
    #[arg(long, default_value_t = 2.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Network and optimization settings shared by train, ablate and sweep.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainOpts {
    /// Unrolled layers K.
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    /// Hidden channels C.
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// HR side of the training crops.
    #[arg(long, default_value_t = 32)]
    pub patch: usize,
    /// Seeds weight initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// none, no_prox, shared_weights, fused_block or transposed_kernels.
    #[arg(long, default_value = "none", value_parser = parse_ablation)]
    pub ablation: Ablation,
    /// per_modality or joint.
    #[arg(long, default_value = "per_modality", value_parser = parse_serde::<Normalization>)]
    pub normalization: Normalization,
    /// identity_prox or uniform.
    #[arg(long, default_value = "identity_prox", value_parser = parse_serde::<InitScheme>)]
    pub init: InitScheme,
    /// Initial value of every step size.
    #[arg(long, default_value_t = pansharp::gppnn::TRAIN_RHO_INIT)]
    pub rho_init: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
}

/// Settings of the classical solver.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GpOpts {
    #[arg(long, default_value_t = 0.5)]
    pub gp_rho: f64,
    #[arg(long, default_value_t = 50)]
    pub gp_iterations: usize,
    /// identity or nonneg_clip.
    #[arg(long, default_value = "identity", value_parser = parse_serde::<pansharp::gp::Prox>)]
    pub gp_prox: pansharp::gp::Prox,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated: gt, bicubic, ihs, brovey, hpf, sfim, gp, gppnn.
    #[arg(long, value_delimiter = ',', default_value = "bicubic,ihs,brovey,hpf,sfim,gp")]
    pub methods: Vec<String>,
    /// Checkpoint directory, required for gppnn.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub gp: GpOpts,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct FuseArgs {
    /// LRMS `.ten` file.
    #[arg(long)]
    pub lrms: PathBuf,
    /// PAN `.ten` file.
    #[arg(long)]
    pub pan: PathBuf,
    /// gppnn, bicubic, ihs, brovey, hpf, sfim or gp.
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Degradation for gp: a dataset spec.json. Defaults to the standard
    /// Gaussian at the pair's ratio.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[command(flatten)]
    pub gp: GpOpts,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Layer counts to try.
    #[arg(long, value_delimiter = ',', default_value = "2,4")]
    pub k_list: Vec<usize>,
    /// Widths to try.
    #[arg(long, value_delimiter = ',', default_value = "8,16")]
    pub c_list: Vec<usize>,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Directory for report.csv and run_config.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Negate the convolution input gradient (test fixture).
    #[arg(long, hide = true)]
    #[serde(default)]
    pub inject_fault: bool,
}

#[derive(Args, Debug)]
struct RerunArgs {
    /// A run_config.json.
    config: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Marks failures that exit with code 1.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        e.downcast_ref::<NumericFailure>().is_some()
            || e.downcast_ref::<pansharp::Error>().is_some_and(pansharp::Error::is_numeric)
    });
    if numeric {
        1
    } else {
        2
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Fuse(a) => commands::fuse(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Rerun(a) => run(commands::recorded_command(&a.config, a.out)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
