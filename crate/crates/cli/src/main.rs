mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Multi-view synchronized video generation at desk scale.
///
/// Every command reads built-in defaults, then `--config FILE` (`key = value`
/// lines), then flags, and writes the merged settings to `run_config.txt`
/// beside its outputs. Set SCM_THREADS to cap worker threads.
#[derive(Parser, Debug)]
#[command(name = "mvsync", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-camera dataset.
    Forge(ForgeArgs),
    /// Train the backbone, then the synchronization modules.
    Train(TrainArgs),
    /// Jointly generate one video per camera.
    Sample(SampleArgs),
    /// Generate novel views of a reference video seen by camera 0.
    Rerender(RerenderArgs),
    /// Score generated videos against a dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Settings file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ForgeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    scenes: Option<String>,
    #[arg(long)]
    cams: Option<String>,
    #[arg(long)]
    frames: Option<String>,
    #[arg(long)]
    height: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    trajectories: Option<String>,
    #[arg(long)]
    trajectory_len: Option<String>,
    #[arg(long)]
    trajectory_step_deg: Option<String>,
    #[arg(long)]
    general: Option<String>,
    #[arg(long)]
    corr_stride: Option<String>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    patch: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    max_prompt: Option<String>,
    #[arg(long)]
    ffn_mult: Option<String>,
    #[arg(long)]
    time_dim: Option<String>,
    /// per_position, full_frame or epipolar.
    #[arg(long)]
    sync_variant: Option<String>,
    /// Epipolar band in pixels; empty means 1.5 patch diagonals.
    #[arg(long)]
    band_px: Option<String>,
    /// extrinsic or plucker.
    #[arg(long)]
    camera: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    pretrain_steps: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    pretrain_lr: Option<String>,
    /// Multi-view video, multi-view image, single-view video.
    #[arg(long)]
    probs: Option<String>,
    /// Comma-separated `fraction_end:theta_lo:theta_hi` stages.
    #[arg(long)]
    curriculum: Option<String>,
    #[arg(long)]
    v2mv: Option<String>,
    #[arg(long)]
    p_replace: Option<String>,
    #[arg(long)]
    loss_on_reference: Option<String>,
    #[arg(long)]
    text_dropout: Option<String>,
    #[arg(long)]
    views_min: Option<String>,
    #[arg(long)]
    views_max: Option<String>,
    #[arg(long)]
    max_gap: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    /// Continue from a checkpoint; its stored training settings win.
    #[arg(long)]
    resume: Option<String>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    cams: Option<String>,
    #[arg(long)]
    prompt: Option<String>,
    /// Sample every scene of a dataset with its own cameras and caption.
    #[arg(long)]
    data: Option<String>,
    /// Cameras per dataset scene.
    #[arg(long)]
    views: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    frames: Option<String>,
    #[arg(long)]
    height: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    shared_noise: Option<String>,
    #[arg(long)]
    text_scale: Option<String>,
}

#[derive(Args, Debug)]
pub struct RerenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Reference video, `frames x 3 x h x w`.
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    cams: Option<String>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    video_scale: Option<String>,
    #[arg(long)]
    text_scale: Option<String>,
    #[arg(long)]
    shared_noise: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of per-scene subdirectories of `view_k.scmt` files.
    #[arg(long)]
    generated: Option<String>,
    #[arg(long)]
    data: Option<String>,
    /// Report directory; defaults to the generated directory.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    /// consistent, ground_truth or block.
    #[arg(long)]
    matcher: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Check a trained model instead of a fresh one.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    probes: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Multiplies analytic gradients; anything but 1 should fail.
    #[arg(long)]
    fault_scale: Option<String>,
    /// Standard deviation for randomizing the zero-initialized sync modules.
    #[arg(long)]
    sync_std: Option<String>,
    #[arg(long)]
    views: Option<String>,
    #[arg(long)]
    frames: Option<String>,
    #[arg(long)]
    input_height: Option<String>,
    #[arg(long)]
    input_width: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("SCM_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("SCM_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            anyhow::bail!("SCM_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Forge(a) => commands::forge(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Rerender(a) => commands::rerender(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| {
                matches!(c.downcast_ref::<mvsync_core::Error>(), Some(mvsync_core::Error::Config(_)))
                    || c.downcast_ref::<commands::UsageError>().is_some()
            });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
