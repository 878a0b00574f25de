mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use se_lab::config::ConfigError;
use se_lab::training::{DecoderInput, EncoderLoss, Mode};

#[derive(Parser, Debug)]
#[command(name = "se-lab", version, about = "Causal speech enhancement with self-supervised teacher embeddings")]
struct Cli {
    /// Seed for every random stream; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mix every manifest record and write noisy and clean WAV files.
    Mix {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the enhancement model in one of the baseline or teacher-guided modes.
    Train {
        #[command(flatten)]
        common: RunArgs,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Weight of the mode's auxiliary loss term.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Pre-train the encoder towards teacher embeddings of clean speech.
    PretrainEncoder {
        #[command(flatten)]
        common: RunArgs,
        #[arg(long, value_enum)]
        loss: Option<EncoderLossArg>,
    },
    /// Pre-train the decoder to reconstruct clean speech.
    PretrainDecoder {
        #[command(flatten)]
        common: RunArgs,
        #[arg(long, value_enum)]
        input: Option<DecoderInputArg>,
        /// Encoder checkpoint for the frozen-encoder input.
        #[arg(long)]
        encoder_ckpt: Option<PathBuf>,
    },
    /// Train with the baseline objective from pre-trained encoder and decoder halves.
    Finetune {
        #[command(flatten)]
        common: RunArgs,
        #[arg(long)]
        encoder_ckpt: PathBuf,
        #[arg(long)]
        decoder_ckpt: PathBuf,
    },
    /// Enhance every manifest mixture and report SI-SDR and STOI.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        stoi: bool,
    },
    /// Lag statistics of embedding frames stored in SEB1 files.
    Analyze {
        #[arg(long, value_delimiter = ',', default_value = "20,60,400,1000,2000")]
        lags: Vec<u32>,
        #[arg(long, value_enum, default_value = "corr")]
        metric: MetricArg,
        /// Layer index; the last layer when absent.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every sample value.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Export a log-magnitude spectrogram as CSV.
    Spectrogram {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every analytic gradient against central finite differences.
    Gradcheck,
    /// List the tensors of a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Output directory for config, seed, metrics and checkpoints.
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Train on this many generated clips instead of a manifest.
    #[arg(long)]
    synthetic_clips: Option<usize>,
    /// Directory of SEB1 teacher files.
    #[arg(long, conflicts_with = "synthetic_teacher")]
    teacher_dir: Option<PathBuf>,
    /// Use the built-in random teacher.
    #[arg(long)]
    synthetic_teacher: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Default,
    Tiny,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EncoderLossArg {
    L1,
    L2,
    Cosine,
}

impl From<EncoderLossArg> for EncoderLoss {
    fn from(a: EncoderLossArg) -> Self {
        match a {
            EncoderLossArg::L1 => EncoderLoss::L1,
            EncoderLossArg::L2 => EncoderLoss::L2,
            EncoderLossArg::Cosine => EncoderLoss::Cosine,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DecoderInputArg {
    Teacher,
    FrozenEncoder,
}

impl From<DecoderInputArg> for DecoderInput {
    fn from(a: DecoderInputArg) -> Self {
        match a {
            DecoderInputArg::Teacher => DecoderInput::Teacher,
            DecoderInputArg::FrozenEncoder => DecoderInput::FrozenEncoder,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Corr,
    /// Raw and mean-norm-normalized distances.
    L2,
    All,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            if let Some(c) = e.downcast_ref::<ConfigError>() {
                eprintln!("error: invalid configuration: {c}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
