use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "deadnet", version, about = "Phototoxicity classification from label-free images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic corpus and its manifest.
    Synth(Synth),
    /// Expand a manifest through an augmentation pipeline into raw f32 dumps.
    Augment(Augment),
    /// Train a network and write a checkpoint plus training log.
    Train(Train),
    /// Classify every image of a manifest and report accuracy.
    Eval(Eval),
    /// Classify a single image.
    Classify(Classify),
    /// Sliding-window sick-probability map of a large image.
    Heatmap(Heatmap),
    /// Grad-CAM map of one image, optionally with ensemble weights.
    Gradcam(Gradcam),
    /// Synthesize the input that maximizes a class score.
    Classmodel(Classmodel),
    /// BCa confidence interval over virtual batches of classifications.
    Bootstrap(Bootstrap),
    /// Inter-annotator agreement from a campaign log; optionally export manifests.
    Concordance(Concordance),
    /// Run the annotation service.
    Serve(Serve),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassArg {
    Healthy,
    Sick,
}

impl ClassArg {
    pub fn index(self) -> usize {
        match self {
            ClassArg::Healthy => deadnet::model::HEALTHY,
            ClassArg::Sick => deadnet::model::SICK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PipelineArg {
    /// Full images: warps, blurs, crops, dihedral group.
    A,
    /// Frame sequences: dihedral group, blurs, frames, noise.
    B,
}

#[derive(Debug, Args)]
pub struct Synth {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// Image height and width, px.
    #[arg(long, default_value_t = 72)]
    pub size: usize,
    /// One cell per quadrant; sick images confine the sick structures to one quadrant.
    #[arg(long)]
    pub quadrant: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Augment {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "a")]
    pub pipeline: PipelineArg,
    /// JSON augmentation config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long)]
    pub crop_stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out manifest; without it, stage positions are split off the training manifest.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Network input extent, px.
    #[arg(long, default_value_t = 220)]
    pub size: usize,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Writes `classifications.jsonl` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Classify {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Heatmap {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the network input extent.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = deadnet::heatmap::DEFAULT_STRIDE)]
    pub stride: usize,
    #[arg(long, default_value_t = 0.6)]
    pub opacity: f64,
}

#[derive(Debug, Args)]
pub struct Gradcam {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "sick")]
    pub class: ClassArg,
    #[arg(long, default_value = deadnet::interpret::DEFAULT_LAYER)]
    pub layer: String,
    /// Average the weights over this manifest's images of `--class`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0.6)]
    pub opacity: f64,
}

#[derive(Debug, Args)]
pub struct Classmodel {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "sick")]
    pub class: ClassArg,
    /// JSON class-model config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Start from this image instead of zeros.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Bootstrap {
    /// JSON lines of classifications, as written by `eval`.
    #[arg(long)]
    pub classifications: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 100)]
    pub batches: usize,
    #[arg(long, default_value_t = deadnet::stats::DEFAULT_RESAMPLES)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report the fraction predicted healthy instead of accuracy.
    #[arg(long)]
    pub healthy_rate: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Concordance {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub log: PathBuf,
    /// Write `train.jsonl` and `test.jsonl` of the unanimous sequences here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = deadnet_annotate::DEFAULT_TRAIN_FRACTION)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Static files for the browser client.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}
