use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use wah_core::camera::TrajectoryKind;
use wah_core::pack::PackMode;

mod commands;
mod svg;

/// Camera control for a toy history-conditioned video transformer by
/// feeding camera-warped frames through its history stream.
#[derive(Debug, Parser)]
#[command(name = "wah", version)]
pub struct Cli {
    /// Root seed. Every random stream is derived from it by name. Commands
    /// that read a plan keep the plan's seeds unless this is given.
    #[arg(long, global = true, value_name = "SEED")]
    pub seed: Option<u64>,

    /// Log more (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Log only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Render synthetic clips: frames, depth, foreground masks and cameras.
    Synth(SynthArgs),
    /// Warp one frame of a clip into a run of target cameras.
    Warp(WarpArgs),
    /// Pack a clip frame and its warp into a conditioning sequence.
    Pack(PackArgs),
    /// Pretrain the backbone on clean-history continuation.
    Pretrain(PretrainArgs),
    /// Train a low-rank adapter on one warp-conditioned clip.
    Finetune(FinetuneArgs),
    /// Generate one chunk for a clip.
    Sample(SampleArgs),
    /// Score generated frames against a clip.
    Eval(EvalArgs),
    /// Run the interface ablation over the held-out clips.
    Ablate(AblateArgs),
    /// Train one adapter per sweep source and score each.
    Sweep(SweepArgs),
    /// Time baseline and warp-conditioned sampling.
    Profile(ProfileArgs),
    /// Render result tables as text and SVG charts.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Number of clips.
    #[arg(long, default_value_t = 40)]
    pub clips: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = 33)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    /// Camera motions, assigned to clips in turn.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "pan_left,pan_right,tilt_up,tilt_down,dolly_in,dolly_out,truck_left,truck_right,orbit"
    )]
    pub kinds: Vec<TrajectoryKind>,
    /// Total rotation over a clip in degrees (pans, tilts, orbits).
    #[arg(long, default_value_t = 20.0)]
    pub rotation: f64,
    /// Total translation over a clip (dollies, trucks).
    #[arg(long, default_value_t = 0.8)]
    pub translation: f64,
    /// Output directory; one `clip_NNN` directory per clip.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct WarpArgs {
    /// Clip directory.
    #[arg(long)]
    pub clip: PathBuf,
    /// Frame to warp.
    #[arg(long, default_value_t = 0)]
    pub source: usize,
    /// Target cameras: the clip's frames `source+1 ..= source+frames`.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Camera file to use as targets instead of the clip's cameras.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PackArgs {
    /// Clip directory; frame `source` becomes the clean history.
    #[arg(long)]
    pub clip: PathBuf,
    /// Warp directory written by `warp`; not needed for text_only.
    #[arg(long)]
    pub warp: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub source: usize,
    /// text_only, full, noalign, novisdrop, seqconcat or chfusion.
    #[arg(long, default_value = "full")]
    pub mode: PackMode,
    /// Visible-token threshold.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Square patch size in pixels.
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    /// Experiment plan; the desk plan when omitted.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Override the plan's iteration count.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    /// Experiment plan; the desk plan when omitted.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Pretrained model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Source clip directory; the plan's one-shot source when omitted.
    #[arg(long)]
    pub clip: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub rank: usize,
    #[arg(long, default_value_t = 32.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Adapter checkpoint to mount.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Clip directory; frame `source` is the history, the next K cameras
    /// are the targets.
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub source: usize,
    #[arg(long, default_value = "full")]
    pub mode: PackMode,
    #[arg(long, default_value_t = 6)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Directory of generated `NNN.ppm` frames.
    #[arg(long)]
    pub generated: PathBuf,
    /// Reference clip directory.
    #[arg(long)]
    pub clip: PathBuf,
    /// Frame the chunk was generated from.
    #[arg(long, default_value_t = 0)]
    pub source: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    /// Experiment plan; the desk plan when omitted.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Pretrained model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// One-shot adapter; one-shot cells fail without it.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Concurrent cells.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Experiment plan; the desk plan when omitted.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Pretrained model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Concurrent cells.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProfileArgs {
    /// Experiment plan; the desk plan when omitted.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Pretrained model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Run directory holding pretrain/, ablation/, sweep/ or profile/.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for report.md and the SVG charts.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
