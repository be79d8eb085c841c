//! `uvatar` command-line interface.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "uvatar", version, about = "UV-anchored 3D Gaussian avatars")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Pipeline configuration (JSON); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// Output root directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads (falls back to the configuration, then E3GEN_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the procedural toy body model, optionally with synthetic subjects.
    ToyModel(ToyModelArgs),
    /// Build anchors, skinning volume, an initial plane and decoders.
    Init(InitArgs),
    /// Fit feature planes and shared decoders to multi-view datasets.
    Fit(FitArgs),
    /// Render colour (and optionally normal) images of a fitted avatar.
    Render(RenderArgs),
    /// Render a pose sequence.
    Animate(AnimateArgs),
    /// Edit feature planes in UV space.
    #[command(subcommand)]
    Edit(EditCommand),
    /// Joint fitting and denoiser training, and plane sampling.
    #[command(subcommand)]
    Diffusion(DiffusionCommand),
    /// Measure rendering throughput.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct ToyModelArgs {
    /// Tessellation density (1 = coarsest).
    #[arg(long, default_value_t = 1)]
    pub detail: u32,
    /// Also render this many synthetic subjects under `dataset/` and `heldout/`.
    #[arg(long, default_value_t = 0)]
    pub subjects: usize,
    /// Training views per synthetic subject.
    #[arg(long, default_value_t = 16)]
    pub views: usize,
    /// Held-out views per synthetic subject.
    #[arg(long, default_value_t = 4)]
    pub heldout: usize,
    /// Image size of synthetic views.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Midpoint subdivision levels used to render synthetic subjects.
    #[arg(long)]
    pub subdivision: Option<u32>,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    /// Body model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Feature plane resolution in texels.
    #[arg(long)]
    pub plane_resolution: Option<usize>,
    /// Midpoint subdivision levels for the anchor mesh.
    #[arg(long)]
    pub subdivision: Option<u32>,
    /// Skinning volume resolution per axis.
    #[arg(long)]
    pub volume_resolution: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Directory written by `init`.
    #[arg(long)]
    pub init: PathBuf,
    /// Directory of subject folders.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Optimizer steps (shared round-robin across subjects).
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct AvatarArgs {
    /// Directory written by `init`.
    #[arg(long)]
    pub init: PathBuf,
    /// Feature plane (defaults to the one in the init directory).
    #[arg(long)]
    pub plane: Option<PathBuf>,
    /// Decoder checkpoint (defaults to the one in the init directory).
    #[arg(long)]
    pub decoders: Option<PathBuf>,
    /// Image size.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub avatar: AvatarArgs,
    /// Pose/shape parameters (JSON); the rest pose if omitted.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    /// Camera list (JSON); an orbit around the toy body if omitted.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Orbit views when no camera file is given.
    #[arg(long, default_value_t = 1)]
    pub views: usize,
    /// Also write normal maps.
    #[arg(long)]
    pub normals: bool,
}

#[derive(Args, Debug)]
pub struct AnimateArgs {
    #[command(flatten)]
    pub avatar: AvatarArgs,
    /// Pose sequence: JSON array of pose/shape parameter frames.
    #[arg(long)]
    pub poses: PathBuf,
    /// Camera azimuth in degrees from the front.
    #[arg(long, default_value_t = 0.0)]
    pub azimuth: f64,
}

#[derive(Subcommand, Debug)]
pub enum EditCommand {
    /// Copy a region of one plane into another.
    Transfer(TransferArgs),
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Directory written by `init` (for the region atlas).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Plane providing the features.
    #[arg(long)]
    pub src: PathBuf,
    /// Plane receiving the features.
    #[arg(long)]
    pub dst: PathBuf,
    /// Named region from the atlas.
    #[arg(long, conflicts_with = "mask", required_unless_present = "mask")]
    pub region: Option<String>,
    /// Mask PNG at plane resolution (nonzero = selected).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// geometry, appearance or both.
    #[arg(long, default_value = "both")]
    pub halves: String,
    /// Feather width in texels (defaults to the region's).
    #[arg(long)]
    pub feather: Option<f64>,
    /// Output file name under the output root.
    #[arg(long, default_value = "edited.e3gp")]
    pub output: String,
}

#[derive(Subcommand, Debug)]
pub enum DiffusionCommand {
    /// Fit planes and train the denoiser in one stage.
    Train(TrainArgs),
    /// Draw new planes from a trained denoiser.
    Sample(SampleArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by `init`.
    #[arg(long)]
    pub init: PathBuf,
    /// Directory of subject folders.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Optimizer steps (shared round-robin across subjects).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Weight of the photometric fitting loss.
    #[arg(long)]
    pub lambda_fit: Option<f64>,
    /// Weight of the denoising loss.
    #[arg(long)]
    pub lambda_denois: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Denoiser checkpoint.
    #[arg(long)]
    pub denoiser: PathBuf,
    /// Number of planes to sample.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Sampler steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Plane resolution (defaults to the configuration's).
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Synthetic Gaussians in the benchmark scene.
    #[arg(long, default_value_t = 50_000)]
    pub gaussians: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 512)]
    pub resolution: usize,
    /// Timed frames.
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
