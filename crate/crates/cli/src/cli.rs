use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use swanvox::ingest::{Split, VoxelMode};
use swanvox::latent::Metric;

use crate::config::Preset;

#[derive(Debug, Parser)]
#[command(name = "swan-vox", version, about = "Multi-scale residual-quantized autoencoding of density volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn command_name(&self) -> &'static str {
        match self.command {
            Command::Voxelize(_) => "voxelize",
            Command::Curate(_) => "curate",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Denoise(_) => "denoise",
            Command::Neighbors(_) => "neighbors",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rasterize an OFF or OBJ mesh into an MRC occupancy map.
    Voxelize(VoxelizeArgs),
    /// Fetch, filter, mask, resample, augment and split EMDB entries.
    Curate(CurateArgs),
    /// Train a model and write checkpoints and the loss curve.
    Train(TrainArgs),
    /// Score reconstructions (or a prediction/ground-truth pair) and write metrics.
    Eval(EvalArgs),
    /// Project a noisy map through a trained model.
    Denoise(DenoiseArgs),
    /// Build or query a latent embedding database.
    Neighbors(NeighborsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Surface,
    Solid,
}

impl From<ModeArg> for VoxelMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Surface => VoxelMode::Surface,
            ModeArg::Solid => VoxelMode::Solid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Euclidean,
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

/// Options shared by the commands that write a run directory.
#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parent directory for timestamped run directories.
    #[arg(long)]
    pub out_root: Option<PathBuf>,
    /// Write into exactly this directory instead of a timestamped one.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct VoxelizeArgs {
    /// Input mesh (.off or .obj).
    pub input: PathBuf,
    /// Output MRC map.
    pub output: PathBuf,
    /// Grid side in voxels.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Solid)]
    pub mode: ModeArg,
    /// Voxel spacing written to the map header, in Å.
    #[arg(long, default_value_t = 1.0)]
    pub spacing: f64,
}

#[derive(Clone, Debug, Args)]
pub struct CurateArgs {
    /// Accession list (one per line) or a dataset manifest.
    pub manifest: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// Lower molecular-weight bound in kDa (inclusive).
    #[arg(long)]
    pub weight_min: Option<f64>,
    /// Upper molecular-weight bound in kDa (inclusive).
    #[arg(long)]
    pub weight_max: Option<f64>,
    /// Target voxel spacing in Å.
    #[arg(long)]
    pub apix: Option<f64>,
    /// Output cube side in voxels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Augmentation rotations per entry.
    #[arg(long)]
    pub rotations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Serve only cached entries.
    #[arg(long)]
    pub offline: bool,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Concurrent fetch and processing workers.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Model preset used when the config file does not set one.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-item gradients.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Dataset manifest with train and val splits.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Train on this many procedural shapes instead of a manifest.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub synthetic_seed: Option<u64>,
    /// Keep a checkpoint every N epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint that carries training state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Trained model; required unless --pred and --gt are given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub synthetic_seed: Option<u64>,
    /// Score this map against --gt instead of running a model.
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    /// Binarization threshold for IoU and F1.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Noisy input map.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Denoised output map.
    #[arg(long = "out")]
    pub output: PathBuf,
    /// Also write the band-pass baseline here.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct NeighborsArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Embedding database; ids live in `<db>.ids`.
    #[arg(long)]
    pub db: PathBuf,
    /// Embed these maps and write the database before querying.
    #[arg(long, num_args = 1..)]
    pub build: Vec<PathBuf>,
    /// Query map; omitted with --query-id, every database entry is queried.
    #[arg(long)]
    pub query: Option<PathBuf>,
    /// Id of the query; defaults to the query file stem.
    #[arg(long)]
    pub query_id: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    pub metric: MetricArg,
    /// Neighbor table CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
