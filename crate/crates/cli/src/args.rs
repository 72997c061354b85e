use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "ccfr",
    version,
    about = "Coarse classification with retrieval-based fine re-ranking",
    long_about = "Coarse classification with retrieval-based fine re-ranking.\n\n\
                  Log verbosity is read from the CCFR_LOG environment variable (default: info)."
)]
pub struct Cli {
    /// Worker threads for batch re-ranking and sweeps. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the binary searching database from JSONL embeddings.
    BuildDb {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster class-mean embeddings into super classes.
    Hierarchy {
        #[arg(long)]
        embeddings: PathBuf,
        /// Number of super classes (default: round(C / 4)).
        #[arg(long)]
        num_super: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse local region features with the global feature into embeddings.
    Fuse {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep the raw concatenation instead of L2-normalizing it.
        #[arg(long)]
        no_normalize: bool,
    },
    /// Scale-separated NMS over scored boxes, or anchor generation.
    Nms(NmsArgs),
    /// Re-rank coarse predictions with the searching database.
    Rerank {
        #[command(flatten)]
        inputs: PipelineInputs,
        #[command(flatten)]
        rerank: RerankFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare retrieval-only, classification-only and re-ranked accuracy.
    Eval {
        #[command(flatten)]
        inputs: PipelineInputs,
        #[command(flatten)]
        rerank: RerankFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy over a (topn, t_sf, t_sc) grid, written as CSV.
    Sweep {
        #[command(flatten)]
        inputs: PipelineInputs,
        /// Comma list or start:stop:step.
        #[arg(long, default_value = "2:6:1")]
        topn: String,
        #[arg(long = "t-sf", default_value = "0.4:0.95:0.05")]
        t_sf: String,
        #[arg(long = "t-sc", default_value = "0.5:0.95:0.05")]
        t_sc: String,
        #[arg(long)]
        topm: Option<usize>,
        #[arg(long, value_enum)]
        topm_mode: Option<TopmModeArg>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic loss gradients against finite differences.
    LossCheck {
        /// Random instances per loss.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Write the synthetic Gaussian-cluster fixture.
    GenFixture {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        confusable_fraction: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct PipelineInputs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub preds: PathBuf,
    /// Query embeddings (JSONL); labels serve as ground truth for evaluation.
    #[arg(long)]
    pub queries: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RerankFlags {
    #[arg(long)]
    pub topn: Option<usize>,
    #[arg(long)]
    pub topm: Option<usize>,
    #[arg(long = "t-sf")]
    pub t_sf: Option<f64>,
    #[arg(long = "t-sc")]
    pub t_sc: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_enum)]
    pub topm_mode: Option<TopmModeArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TopmModeArg {
    FixedTopm,
    ThresholdOnly,
}

#[derive(Debug, Args)]
pub struct NmsArgs {
    /// Scored boxes of one image (JSONL).
    #[arg(long, required_unless_present = "generate_anchors")]
    pub boxes: Option<PathBuf>,
    /// Write the anchor grid instead of running NMS.
    #[arg(long, conflicts_with = "boxes")]
    pub generate_anchors: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long)]
    pub keep_per_scale: Option<usize>,
    #[arg(long)]
    pub image_size: Option<u32>,
    /// Comma-separated anchor side lengths.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    /// Comma-separated grid strides, one per scale.
    #[arg(long, value_delimiter = ',')]
    pub strides: Option<Vec<u32>>,
    #[arg(long)]
    pub no_clip: bool,
}
