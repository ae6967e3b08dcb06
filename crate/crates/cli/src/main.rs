mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stfv::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "stfv", version, about = "Fisher-vector video representations with space-time pooling or location-extended descriptors")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file whose keys mirror the long flag names; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic descriptor dataset.
    Synth(SynthCmd),
    /// Fit or apply a PCA projection.
    #[command(subcommand)]
    Pca(PcaCmd),
    /// Fit a diagonal Gaussian mixture.
    #[command(subcommand)]
    Gmm(GmmCmd),
    /// Encode one descriptor file or every video of a manifest.
    Encode(EncodeCmd),
    /// Train one-vs-all linear SVMs on an encoded feature matrix.
    Train(TrainCmd),
    /// Evaluate a trained model, or run leave-one-group-out end to end.
    Eval(EvalCmd),
    /// Print the representation dimension for a configuration.
    Dims(DimsCmd),
    /// Compare encoding methods on identical splits.
    Bench(BenchCmd),
}

#[derive(Args, Debug, Default, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub videos_per_class: Option<usize>,
    #[arg(long)]
    pub phases_per_class: Option<usize>,
    #[arg(long)]
    pub descriptors_per_video: Option<usize>,
    /// Descriptor dimension of generated data.
    #[arg(long = "synth-dim")]
    pub synth_dim: Option<usize>,
    #[arg(long)]
    pub spatial_jitter: Option<f64>,
    #[arg(long)]
    pub temporal_jitter: Option<f64>,
    #[arg(long)]
    pub reversed_pairs: Option<bool>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Generator seed.
    #[arg(long = "synth-seed")]
    pub synth_seed: Option<u64>,
    #[arg(long)]
    pub groups: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthCmd {
    #[command(flatten)]
    pub spec: SynthArgs,
    /// Output directory (receives manifest.json and videos/).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum PcaCmd {
    /// Fit PCA on a descriptor sample drawn from a manifest.
    Fit(PcaFitCmd),
    /// Project one descriptor file.
    Apply(PcaApplyCmd),
}

#[derive(Args, Debug)]
pub struct PcaFitCmd {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output dimension (default: half the input dimension).
    #[arg(long)]
    pub pca_dim: Option<usize>,
    #[arg(long)]
    pub rootsift: bool,
    #[arg(long)]
    pub sample_count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub channel: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PcaApplyCmd {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub rootsift: bool,
}

#[derive(Subcommand, Debug)]
pub enum GmmCmd {
    /// Fit by EM on a descriptor sample drawn from a manifest.
    Fit(GmmFitCmd),
}

#[derive(Args, Debug)]
pub struct GmmFitCmd {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// PCA model applied before fitting.
    #[arg(long)]
    pub pca: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sample_count: Option<usize>,
    #[arg(long)]
    pub variance_floor: Option<f64>,
    #[arg(long)]
    pub weight_floor: Option<f64>,
    #[arg(long)]
    pub rootsift: bool,
    /// Fit on location-extended descriptors.
    #[arg(long)]
    pub sted: bool,
    #[arg(long)]
    pub location_scale: Option<f64>,
    #[arg(long)]
    pub channel: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EncodeCmd {
    #[arg(long)]
    pub gmm: Option<PathBuf>,
    #[arg(long)]
    pub pca: Option<PathBuf>,
    /// Single descriptor file; output is an FVEC vector.
    #[arg(long, conflicts_with = "manifest")]
    pub input: Option<PathBuf>,
    /// Dataset manifest; output is an FMAT matrix in manifest order.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated grids, e.g. 1x1x1,2x2x1,1x1x2,2x2x2.
    #[arg(long)]
    pub pyramid: Option<String>,
    #[arg(long)]
    pub sted: bool,
    #[arg(long)]
    pub location_scale: Option<f64>,
    #[arg(long)]
    pub power_alpha: Option<f64>,
    #[arg(long)]
    pub rootsift: bool,
    #[arg(long)]
    pub channel: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SvmArgs {
    /// SVM regularization constant.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub svm_tol: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    /// FMAT matrix whose rows follow the manifest order.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output model (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub svm: SvmArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum Protocol {
    /// Score a trained model on a held-out feature matrix.
    Split,
    /// Leave one group out, refitting everything per fold.
    Logo,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    /// Output PCA dimension; 0 disables PCA (default: half the input).
    #[arg(long)]
    pub pca_dim: Option<usize>,
    #[arg(long)]
    pub rootsift: bool,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
    #[arg(long)]
    pub sample_count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub power_alpha: Option<f64>,
    #[command(flatten)]
    pub svm: SvmArgs,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    #[arg(long, value_enum)]
    pub protocol: Option<Protocol>,
    /// macc or map.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Trained model (split protocol).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Test feature matrix (split protocol).
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// baseline, stp:L, stp-single:L or sted[:lambda] (logo protocol).
    #[arg(long)]
    pub method: Option<String>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Report path (JSON); printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DimsCmd {
    /// Descriptor dimension after PCA, before any location is appended.
    #[arg(long)]
    pub dim: Option<u64>,
    #[arg(long)]
    pub k: Option<u64>,
    #[arg(long)]
    pub pyramid: Option<String>,
    #[arg(long)]
    pub sted: bool,
    #[arg(long)]
    pub channels: Option<u64>,
}

#[derive(Args, Debug)]
pub struct BenchCmd {
    /// Existing dataset; without it a synthetic one is generated.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SynthArgs,
    /// Comma-separated methods.
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub metric: Option<String>,
    /// "logo" or "group:<name>".
    #[arg(long)]
    pub split: Option<String>,
    /// Label pairs scored head to head, e.g. c0:c1,c2:c3. Defaults to the
    /// reversed pairs of a generated dataset.
    #[arg(long)]
    pub pairs: Option<String>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
