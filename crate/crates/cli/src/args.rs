use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand};

/// Steer a conditional TCN towards an effect, then explore its conditioning
/// space.
#[derive(Debug, Parser)]
#[command(name = "nafx", version, about)]
pub struct Cli {
    /// Log level for diagnostics on stderr (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a fresh model to an input/target pair with zero conditioning.
    Steer(SteerArgs),
    /// Process audio through a checkpoint under a conditioning vector.
    Render(RenderArgs),
    /// Evaluate a metric over a 2D conditioning grid.
    Sweep(SweepArgs),
    /// Measure loudness, T60 or the energy decay curve of a WAV file.
    Analyze(AnalyzeArgs),
    /// Decay curves for impulses at several input levels.
    Decay(DecayArgs),
    /// Serve the HTTP API for a checkpoint.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SteerArgs {
    /// Clean input: WAV path or built-in source (impulse:<dur>, noise:<dur>, sine:<freq>,<dur>).
    #[arg(long)]
    pub input: String,
    /// Processed target: WAV path, or effect:<name>[:<param>...] to apply a
    /// reference effect (gain, softclip, echo, lowpass) to the input.
    #[arg(long)]
    pub target: String,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    /// Convolution kernel size.
    #[arg(long, default_value_t = 9)]
    pub kernel: usize,
    #[arg(long, default_value_t = 10)]
    pub dilation_growth: usize,
    #[arg(long, default_value_t = 2)]
    pub cond_dim: usize,
    /// Sample rate used for built-in sources.
    #[arg(long, default_value_t = 44_100)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = 2500)]
    pub iters: usize,
    /// Base learning rate; divided by 10 at 80% and by 100 at 95% of the run.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// FFT sizes of the spectral loss.
    #[arg(long, value_delimiter = ',', default_value = "32,128,512,2048")]
    pub fft_sizes: Vec<usize>,
    /// Print a progress line every N iterations.
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    /// Also write a resumable checkpoint every N iterations.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a `.state` file written by --checkpoint-every.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train on random crops of this many samples instead of the full signal.
    #[arg(long)]
    pub crop_length: Option<usize>,
    /// Clip the global gradient norm.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long, default_value = "model.nafx")]
    pub out: PathBuf,
    #[arg(long, default_value = "history.csv")]
    pub history: PathBuf,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct RemoteArgs {
    /// Use a running service (e.g. http://127.0.0.1:8080) instead of a local checkpoint.
    #[arg(long)]
    pub server: Option<String>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Checkpoint file (not needed with --server).
    #[arg(long, required_unless_present = "server")]
    pub model: Option<PathBuf>,
    /// WAV path or built-in source.
    #[arg(long)]
    pub input: String,
    /// Conditioning vector, comma separated (e.g. --c 3,-2).
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',', num_args = 1)]
    pub c: Vec<f64>,
    #[arg(long, default_value = "render.wav")]
    pub out: PathBuf,
    #[command(flatten)]
    pub remote: RemoteArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, required_unless_present = "server")]
    pub model: Option<PathBuf>,
    /// WAV path or built-in source; use impulse:<dur> for the t60 metric.
    #[arg(long, default_value = "noise:5s")]
    pub input: String,
    #[arg(long, allow_hyphen_values = true, default_value_t = -5.0)]
    pub min: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = 5.0)]
    pub max: f64,
    /// Lattice points per axis.
    #[arg(long, default_value_t = 11)]
    pub steps: usize,
    /// lufs, t60 or rms.
    #[arg(long, default_value = "lufs")]
    pub metric: String,
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
    #[command(flatten)]
    pub remote: RemoteArgs,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("measure").required(true).args(["lufs", "t60", "edc"])))]
pub struct AnalyzeArgs {
    /// Integrated loudness of a WAV file.
    #[arg(long)]
    pub lufs: Option<String>,
    /// Reverberation time of an impulse response.
    #[arg(long)]
    pub t60: Option<String>,
    /// Energy decay curve of an impulse response, written as CSV.
    #[arg(long)]
    pub edc: Option<String>,
    /// CSV destination for --edc (stdout if omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sample rate used for built-in sources.
    #[arg(long, default_value_t = 44_100)]
    pub sample_rate: u32,
}

#[derive(Debug, Args)]
pub struct DecayArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Impulse amplitudes.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1.0")]
    pub levels: Vec<f64>,
    /// Length of each rendered impulse response in seconds.
    #[arg(long, default_value_t = 2.5)]
    pub ir_secs: f64,
    /// Conditioning vector; zeros (the steering value) if omitted.
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',', num_args = 1)]
    pub c: Vec<f64>,
    /// Long-format curves: level,time_s,level_db.
    #[arg(long, default_value = "decay_curves.csv")]
    pub out_curves: PathBuf,
    /// One row per level: level,t60_s,span,status.
    #[arg(long, default_value = "decay_summary.csv")]
    pub out_summary: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory of WAV files preloaded as sources (id = file stem).
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    /// Static UI bundle served at /.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Longest source a request may render, in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub max_render_secs: f64,
}
