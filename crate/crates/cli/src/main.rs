mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("GENSEG_GIT_DESCRIBE"), ")");

/// Referring segmentation by next-scale mask generation, on synthetic scenes.
#[derive(Parser, Debug)]
#[command(name = "genseg", version = VERSION)]
struct Cli {
    /// Directory that every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Flat key=value config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic scene/instruction/mask corpus.
    GenData(GenDataArgs),
    /// Train the multi-scale mask tokenizer on the corpus masks.
    TrainTokenizer(TrainTokenizerArgs),
    /// Train the transformer with the tokenizer frozen.
    Train(TrainArgs),
    /// Segment one scene from an instruction.
    Segment(SegmentArgs),
    /// Score a model on a corpus; writes per-sample records and a summary.
    Eval(EvalArgs),
    /// Compare next-scale decoding against next-token decoding.
    Bench(BenchArgs),
    /// Decode a mask from its first j token scales, for every j.
    DumpScales(DumpScalesArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub no_target_frac: Option<f64>,
    #[arg(long)]
    pub multi_target_frac: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainTokenizerArgs {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step loss log (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub codebook_size: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step loss log (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SamplingArgs {
    /// `argmax` or `cfg` (guided top-k sampling).
    #[arg(long)]
    pub sampling: Option<String>,
    #[arg(long)]
    pub guidance: Option<f32>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub sample_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Scene raster (binary PPM).
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub instruction: String,
    /// Output mask (PGM).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the mask decoded from each scale prefix into this directory.
    #[arg(long)]
    pub dump_scales: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Metrics file (JSON lines: one record per sample, then the summary).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluate only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DumpScalesArgs {
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Mask to tokenize (PGM).
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Short machine-readable name for the error class.
fn error_kind(e: &anyhow::Error) -> (&'static str, u8) {
    use genseg::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::CheckpointNotFound(_)) => ("checkpoint-not-found", 2),
        Some(E::SchemaVersion { .. }) => ("schema-version", 3),
        Some(E::Checkpoint(_)) => ("checkpoint", 3),
        Some(E::Io(_)) => ("io", 4),
        Some(E::Config(_)) => ("config", 5),
        Some(E::Diverged { .. }) => ("diverged", 6),
        Some(_) => ("invalid-input", 5),
        None if e.downcast_ref::<std::io::Error>().is_some() => ("io", 4),
        None => ("config", 5),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(p) => Config::load(&cli.workdir.join(p))?,
        None => Config::default(),
    };
    let ctx = commands::Context { workdir: cli.workdir, config };
    match cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, a),
        Command::TrainTokenizer(a) => commands::train_tokenizer(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Segment(a) => commands::segment(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Bench(a) => commands::bench(&ctx, a),
        Command::DumpScales(a) => commands::dump_scales(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = error_kind(&e);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}
