use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tft_core::evaluation::FoldMode;
use tft_core::model::Ablation;

mod commands;
mod config;

use config::{split_overrides, RunConfig};

/// Time-frequency Transformer speech emotion recognition.
///
/// Any configuration key can be set with `--section.key=value`, for example
/// `--train.batch_size=32` or `--model.dropout=0.1`. Precedence, lowest
/// first: defaults, config file, section overrides, dedicated flags.
#[derive(Parser, Debug)]
#[command(name = "tft", version, about)]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, env = "TFT_CONFIG")]
    config: Option<PathBuf>,

    /// Sets `train.seed`.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (`io.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    /// Sets `train.epochs`.
    #[arg(long)]
    epochs: Option<u32>,

    /// Sets `train.lr`.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
struct EvalFlags {
    /// `speaker` or `session` (`eval.mode`).
    #[arg(long)]
    mode: Option<FoldMode>,

    /// Folds trained concurrently (`eval.jobs`).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn the audio of a manifest into cached log-Mel segments.
    Extract {
        #[command(flatten)]
        common: Common,
        /// CSV with `path,speaker_id,session_id,label` rows.
        #[arg(long)]
        manifest: PathBuf,
        /// Recompute caches that already exist.
        #[arg(long)]
        force: bool,
    },
    /// Train one model on every cached segment.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `extract`.
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Leave-one-speaker (or session) out cross-validation.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Cross-validate each module combination.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
        /// Restrict to these combinations (T+F, T+TF, F+TF, T+F+TF).
        #[arg(long, value_delimiter = ',')]
        only: Vec<Ablation>,
    },
    /// Export the input spectrogram and attention maps of one cached sample.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Utterance id (file stem in the manifest).
        #[arg(long)]
        sample: String,
        /// Segment of the utterance to visualise.
        #[arg(long, default_value_t = 0)]
        segment: u32,
        /// Also write one matrix per head (`eval.per_head`).
        #[arg(long)]
        per_head: bool,
    },
    /// Write a small tone corpus (WAV files and manifest) for smoke tests.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        /// Utterances per class and speaker.
        #[arg(long, default_value_t = 2)]
        utterances: usize,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Extract { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::DumpAttention { common, .. }
            | Command::Synth { common, .. } => common,
        }
    }
}

fn resolve(cmd: &Command, overrides: &[(String, String)]) -> anyhow::Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = RunConfig::load(common.config.as_deref(), overrides)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.io.out_dir = out.clone();
    }
    let (train, eval) = match cmd {
        Command::Train { train, .. } => (Some(train), None),
        Command::Eval { train, eval, .. } | Command::Ablate { train, eval, .. } => (Some(train), Some(eval)),
        _ => (None, None),
    };
    if let Some(t) = train {
        if let Some(e) = t.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = t.lr {
            cfg.train.lr = lr;
        }
    }
    if let Some(e) = eval {
        if let Some(m) = e.mode {
            cfg.eval.mode = m;
        }
        if let Some(j) = e.jobs {
            cfg.eval.jobs = j;
        }
    }
    match cmd {
        Command::Ablate { only, .. } if !only.is_empty() => cfg.eval.ablations = only.clone(),
        Command::DumpAttention { per_head: true, .. } => cfg.eval.per_head = true,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> anyhow::Result<()> {
    let cfg = resolve(&cli.command, overrides)?;
    match cli.command {
        Command::Extract { manifest, force, .. } => commands::extract(&cfg, &manifest, force),
        Command::Train { features, resume, .. } => commands::train(&cfg, &features, resume.as_deref()),
        Command::Eval { features, .. } => commands::eval(&cfg, &features),
        Command::Ablate { features, .. } => commands::ablate(&cfg, &features),
        Command::DumpAttention {
            checkpoint,
            features,
            sample,
            segment,
            ..
        } => commands::dump_attention(&cfg, &checkpoint, &features, &sample, segment),
        Command::Synth {
            speakers,
            utterances,
            seconds,
            ..
        } => commands::synth(&cfg, speakers, utterances, seconds),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
