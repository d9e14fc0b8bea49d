use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::FileConfig;

/// Tempo-invariant rhythm analysis in the log-periodicity domain.
#[derive(Debug, Parser)]
#[command(name = "logrhythm", version, about)]
pub struct Cli {
    /// Print a machine-readable JSON summary to stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// JSON file with default values for numeric flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic drum pattern to activation channels plus beat files.
    Gen(GenArgs),
    /// Constant-Q transform of activations (or a WAV file) to a rhythmogram.
    Analyze(AnalyzeArgs),
    /// Estimate the tempo.
    Tempo(TempoArgs),
    /// Track beats.
    Beats(TrackArgs),
    /// Track downbeats.
    Downbeats(DownbeatArgs),
    /// Frequency-domain training targets from annotation times.
    Targets(TargetsArgs),
    /// Train a tempo model on synthetic data, or initialise a fingerprint model.
    Train(TrainArgs),
    /// Fingerprint activations and rank a corpus by similarity.
    Match(MatchArgs),
    /// Score estimated event times against a reference.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnsetKind {
    /// Band-wise spectral flux.
    Flux,
    /// Octave channels of pitched onsets.
    Pitched,
}

/// Where activations come from: a RACT container or a WAV file.
#[derive(Debug, Args)]
pub struct InputArgs {
    /// Activation container (.ract) or audio (.wav).
    pub input: PathBuf,

    /// Activation front end for WAV input.
    #[arg(long, value_enum, default_value_t = OnsetKind::Flux)]
    pub onsets: OnsetKind,
}

#[derive(Debug, Args, Default)]
pub struct CqtArgs {
    /// Lowest analysed periodicity in Hz.
    #[arg(long)]
    pub f_min: Option<f64>,
    /// Highest analysed periodicity in Hz.
    #[arg(long)]
    pub f_max: Option<f64>,
    /// Bins per octave.
    #[arg(long)]
    pub bpo: Option<usize>,
    /// Hop between analysis frames, in signal samples.
    #[arg(long)]
    pub hop: Option<usize>,
    /// Window length in cycles of each bin's frequency.
    #[arg(long)]
    pub q_cycles: Option<f64>,
    /// Bandwidth offset in units of f_min.
    #[arg(long)]
    pub tf_tradeoff: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// standard, accented, or an index into the built-in corpus (0-9).
    #[arg(long, default_value = "standard")]
    pub pattern: String,
    #[arg(long)]
    pub tempo: Option<f64>,
    #[arg(long)]
    pub measures: Option<usize>,
    /// Uniform noise amplitude in [0, 1).
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Activation rate in Hz.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Onset pulse width in frames.
    #[arg(long)]
    pub onset_width: Option<usize>,
    /// Exact tempo ratio applied by resampling before noise, e.g. 2/3.
    #[arg(long)]
    pub scale: Option<String>,
    /// Output activation container.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Beat times file [default: <out stem>.beats.txt].
    #[arg(long)]
    pub beats_out: Option<PathBuf>,
    /// Downbeat times file [default: <out stem>.downbeats.txt].
    #[arg(long)]
    pub downbeats_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureKind {
    Neighbor,
    Multiples,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub cqt: CqtArgs,
    /// Output rhythmogram container.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Also write a feature map here.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FeatureKind::Neighbor)]
    pub feature_kind: FeatureKind,
    /// Frequency multiples for the multiples feature map.
    #[arg(long, value_delimiter = ',', default_values_t = logrhythm::phasefeat::DEFAULT_MULTIPLES)]
    pub multiples: Vec<u32>,
    /// Also write a frames x bins magnitude table here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Channel written to the CSV table; all channels are summed by default.
    #[arg(long)]
    pub channel: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TempoArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub cqt: CqtArgs,
    /// Tempo model; without one, a harmonic-sum heuristic is used.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct PickArgs {
    /// Width of the kept band in octaves, e.g. 1 or 1/2.
    #[arg(long)]
    pub width: Option<String>,
    /// Peak threshold as a fraction of the largest value.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Minimum peak distance as a fraction of the period.
    #[arg(long)]
    pub min_separation: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub cqt: CqtArgs,
    #[command(flatten)]
    pub pick: PickArgs,
    /// Known tempo in BPM; otherwise it is estimated.
    #[arg(long)]
    pub tempo: Option<f64>,
    /// Tempo model used when no tempo is given.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output times file.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DownbeatArgs {
    #[command(flatten)]
    pub track: TrackArgs,
    /// Known measure length in seconds; otherwise tempo times beats per measure.
    #[arg(long)]
    pub measure_secs: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub beats_per_measure: u32,
    /// Take downbeats from the tracked beats, using the measure band only to
    /// choose which beat starts each measure.
    #[arg(long)]
    pub on_beats: bool,
}

#[derive(Debug, Args)]
pub struct TargetsArgs {
    /// Annotation times file.
    pub annotations: PathBuf,
    #[command(flatten)]
    pub cqt: CqtArgs,
    /// Signal duration in seconds [default: last annotation plus one second].
    #[arg(long)]
    pub duration: Option<f64>,
    /// Signal rate in Hz.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Output single-channel rhythmogram holding the targets.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelTask {
    Tempo,
    Fingerprint,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = ModelTask::Tempo)]
    pub task: ModelTask,
    #[command(flatten)]
    pub cqt: CqtArgs,
    #[arg(long)]
    pub examples: Option<usize>,
    #[arg(long)]
    pub tempo_min: Option<f64>,
    #[arg(long)]
    pub tempo_max: Option<f64>,
    #[arg(long)]
    pub tempo_step: Option<f64>,
    /// Length of each example in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Fraction of examples held out for evaluation.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    /// Bins spanned by the first layer's filters.
    #[arg(long, default_value_t = 25)]
    pub kernel_bins: usize,
    #[arg(long, default_value_t = 8)]
    pub filters: usize,
    /// Activation channels the model expects.
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output model header (the weights go next to it with a .bin extension).
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Activations to look up.
    #[arg(long)]
    pub query: Option<PathBuf>,
    /// Activation files forming the corpus.
    #[arg(long, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Previously saved corpus fingerprints.
    #[arg(long)]
    pub fingerprints: Option<PathBuf>,
    /// Write the corpus fingerprints here.
    #[arg(long)]
    pub save: Option<PathBuf>,
    /// Fingerprint model; a seeded random one is used by default.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long, default_value_t = 3)]
    pub k: usize,
    #[command(flatten)]
    pub cqt: CqtArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub reference: PathBuf,
    pub estimate: PathBuf,
    /// Match tolerance in seconds.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Ignore events before this time.
    #[arg(long)]
    pub start: Option<f64>,
    /// Ignore events after this time.
    #[arg(long)]
    pub end: Option<f64>,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("LOGRHYTHM_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| anyhow::anyhow!("LOGRHYTHM_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("LOGRHYTHM_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let out = commands::Output { json: cli.json };
    match &cli.command {
        Command::Gen(a) => commands::gen(a, &file, &out),
        Command::Analyze(a) => commands::analyze(a, &file, &out),
        Command::Tempo(a) => commands::tempo(a, &file, &out),
        Command::Beats(a) => commands::beats(a, &file, &out),
        Command::Downbeats(a) => commands::downbeats(a, &file, &out),
        Command::Targets(a) => commands::targets(a, &file, &out),
        Command::Train(a) => commands::train(a, &file, &out),
        Command::Match(a) => commands::matches(a, &file, &out),
        Command::Eval(a) => commands::eval(a, &file, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
