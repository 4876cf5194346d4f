use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dptempcoh::{Error, Interval, PredictorMode};

mod commands;
mod settings;

#[derive(Parser, Debug)]
#[command(name = "dptempcoh", version, about = "Blind face video restoration with temporal coherence")]
pub struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,

    /// JSON config file. Replaces the preset; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Built-in config used when no file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,

    /// Global seed. Falls back to the config file, then DPTC_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Config override `section.key=value`; repeatable. Values are parsed as
    /// JSON where possible.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Rebuild even if a complete artifact already exists.
    #[arg(long, global = true)]
    pub force: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Toy,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic face clip set.
    ToyData {
        #[arg(long, default_value = "data/hq")]
        out: PathBuf,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Synthesize low-quality clips from a directory of high-quality clips.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Blur sigma range `a:b`.
        #[arg(long)]
        rho: Option<Interval>,
        /// Downsampling factor range `a:b`.
        #[arg(long)]
        b: Option<Interval>,
        /// Noise std range `a:b`, 0-255 units.
        #[arg(long)]
        sigma: Option<Interval>,
        /// JPEG quality range `a:b`.
        #[arg(long)]
        w: Option<Interval>,
        /// Draw fresh parameters for every frame.
        #[arg(long)]
        per_frame: bool,
    },
    /// Stage 1: train the encoder, vision bank and generator.
    PretrainCodec {
        #[arg(long, default_value = "data/hq")]
        data: PathBuf,
        #[arg(long, default_value = "codec")]
        run_id: String,
    },
    /// Cluster per-frame latent statistics into the motion bank.
    BuildMotionBank {
        #[arg(long, default_value = "runs/codec")]
        codec: PathBuf,
        #[arg(long, default_value = "data/hq")]
        data: PathBuf,
        #[arg(long, default_value = "motion_bank")]
        out: PathBuf,
    },
    /// Stage 2: train the restoration model on synthesized degradations.
    Train {
        #[arg(long, default_value = "runs/codec")]
        codec: PathBuf,
        #[arg(long, default_value = "motion_bank")]
        motion_bank: PathBuf,
        #[arg(long, default_value = "data/hq")]
        data: PathBuf,
        #[arg(long, default_value = "restore")]
        run_id: String,
    },
    /// Restore every clip under `--in` (or a single clip directory).
    Restore {
        #[arg(long, default_value = "runs/restore")]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip motion modulation even if the model has a motion bank.
        #[arg(long)]
        no_motion: bool,
    },
    /// Compare restored clips against references.
    Eval {
        #[arg(long)]
        restored: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump last-block predictor attention for one query token.
    ExportAttention {
        #[arg(long, default_value = "runs/restore")]
        model: PathBuf,
        /// A single clip directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Query token `f,y,x` in latent coordinates.
        #[arg(long)]
        query: String,
        /// Attention mode; defaults to the one the model was trained with.
        #[arg(long)]
        mode: Option<PredictorMode>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. }
        | Error::Image(_)
        | Error::Csv(_)
        | Error::MissingDirectory(_)
        | Error::InsufficientFrames { .. }
        | Error::InconsistentFrames(_)
        | Error::Format { .. } => 2,
        Error::Config(_) | Error::Json(_) | Error::InvalidPosition(_) => 3,
        Error::MissingArtifact(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
