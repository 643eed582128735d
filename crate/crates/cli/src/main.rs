//! `chimera`: generate data, train, separate, evaluate, and benchmark.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or I/O
//! error, 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use chimera::cluster::Head;
use chimera::data::CorpusConfig;
use chimera::loss::MiKind;
use commands::{BenchArgs, Disagreement, EvaluateArgs, GenDataArgs, SeparateArgs, TrainArgs};
use config::{ConfigError, RunConfig};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "chimera", version, about = "Two-headed deep clustering / mask inference source separation")]
struct Cli {
    /// More log output; repeat for debug messages.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources, applied in order: preset, file, `--set`, then
/// the command's own flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `desk`, `paper`, or a feature row such as 16k-1024-256-mel150.
    #[arg(long)]
    preset: Option<String>,
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single override, `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.preset {
            Some(name) => RunConfig::preset(name)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.overrides {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| ConfigError(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Msa,
    Mmsa,
}

impl From<Objective> for MiKind {
    fn from(o: Objective) -> Self {
        match o {
            Objective::Msa => MiKind::Msa,
            Objective::Mmsa => MiKind::Mmsa,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HeadArg {
    Dc,
    Mi,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Dc => Head::Dc,
            HeadArg::Mi => Head::Mi,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Oracle {
    Ibm,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a vocals-plus-accompaniment corpus with manifests.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        train: usize,
        #[arg(long, default_value_t = 8)]
        val: usize,
        #[arg(long, default_value_t = 10)]
        test: usize,
        /// Seconds per example.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 8000)]
        sample_rate: u32,
        /// Vocals-to-accompaniment ratio in dB.
        #[arg(long, default_value_t = 0.0)]
        snr: f64,
    },
    /// Train a network and write its checkpoint and per-epoch log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory holding train.tsv and val.tsv.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Deep clustering weight: 1 pure clustering, 0 pure mask inference.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_enum)]
        objective: Option<Objective>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Sets both the initialization and the shuffling seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint's parameters and optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Separate mixtures into `<id>.vocals.wav` and `<id>.accompaniment.wav`.
    Separate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
        /// Frames per inference segment.
        #[arg(long)]
        segment_frames: Option<usize>,
        /// K-means seed for the dc head.
        #[arg(long)]
        seed: Option<u64>,
        /// Mixture WAV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score separations of a test set and print the SDRi table.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory; its test.tsv is evaluated.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Manifest to evaluate instead of `<data>/test.tsv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Heads to score, one table row each.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "mi")]
        head: Vec<HeadArg>,
        /// Score oracle masks computed from the reference sources.
        #[arg(long, value_enum)]
        oracle: Option<Oracle>,
        /// Per-file scores, one tab-separated row per file and method.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Time the low-rank and naive clustering losses over a size sweep.
    BenchDcloss {
        /// Numbers of embedding rows (T·F).
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096,12800")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        sources: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, seed, train, val, test, duration, sample_rate, snr } => {
            let corpus =
                CorpusConfig { n_train: train, n_val: val, n_test: test, duration, sample_rate, snr_db: snr, seed };
            commands::gen_data(&GenDataArgs { out, corpus })
        }
        Command::Train { config, data, alpha, objective, epochs, seed, checkpoint, log, resume } => {
            let mut cfg = config.resolve()?;
            if let Some(d) = data {
                cfg.data = d;
            }
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(o) = objective {
                cfg.objective = o.into();
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.model_seed = s;
                cfg.train_seed = s;
            }
            if let Some(c) = checkpoint {
                cfg.checkpoint = c;
            }
            if let Some(l) = log {
                cfg.log = l;
            }
            commands::train(&TrainArgs { config: cfg, resume })
        }
        Command::Separate { config, checkpoint, out, head, segment_frames, seed, inputs } => {
            let mut cfg = config.resolve()?;
            if let Some(c) = checkpoint {
                cfg.checkpoint = c;
            }
            if let Some(o) = out {
                cfg.output = o;
            }
            if let Some(h) = head {
                cfg.head = h.into();
            }
            if let Some(n) = segment_frames {
                cfg.inference_segment_frames = n;
            }
            if let Some(s) = seed {
                cfg.kmeans_seed = s;
            }
            if cfg.inference_segment_frames == 0 {
                return Err(ConfigError("segment length must be positive".into()).into());
            }
            commands::separate(&SeparateArgs {
                checkpoint: cfg.checkpoint.clone(),
                inputs,
                out: cfg.output.clone(),
                inference: cfg.inference(),
            })
        }
        Command::Evaluate { config, data, manifest, checkpoint, head, oracle, records } => {
            let mut cfg = config.resolve()?;
            if let Some(d) = data {
                cfg.data = d;
            }
            let mut heads: Vec<Head> = Vec::new();
            for h in head {
                if !heads.contains(&h.into()) {
                    heads.push(h.into());
                }
            }
            commands::evaluate(&EvaluateArgs {
                config: cfg,
                manifest,
                checkpoint,
                heads,
                oracle: oracle.is_some(),
                records,
            })
        }
        Command::BenchDcloss { sizes, dim, sources, repeats, seed } => {
            commands::bench_dcloss(&BenchArgs { sizes, dim, sources, repeats, seed })
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_USAGE;
    }
    if err.downcast_ref::<Disagreement>().is_some() {
        return EXIT_NUMERICAL;
    }
    match err.downcast_ref::<chimera::Error>() {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        Some(chimera::Error::InvalidArgument(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn configure_threads() -> Result<(), ConfigError> {
    let Ok(value) = std::env::var("CHIMERA_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("CHIMERA_NUM_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ConfigError(format!("cannot size thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
