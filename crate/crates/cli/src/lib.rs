//! The `mdam` command line: training runs, evaluation, ablation sweeps,
//! gradient checks, attention dumps and synthetic data generation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mdam::data::load_dataset;
use mdam::{StoryInstance, Variant, VariantSpec};

mod ablate;
mod attention;
mod eval;
mod gendata;
mod gradcheck;
mod train;

pub use ablate::{ablate, AblateArgs, AblationRow, ABLATION_COLUMNS};
pub use attention::{dump_attention, DumpAttentionArgs};
pub use eval::{eval, EvalArgs};
pub use gendata::{gen_data, GenDataArgs};
pub use gradcheck::{gradcheck, GradcheckArgs};
pub use train::{train, RunMetadata, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "mdam", version, about = "Multimodal dual attention memory for video story QA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model with the two-phase schedule.
    Train(TrainArgs),
    /// Score checkpoints (several form an ensemble) on a dataset.
    Eval(EvalArgs),
    /// Train a grid of variants and depths and tabulate their accuracy.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients for every variant.
    Gradcheck(GradcheckArgs),
    /// Write attention weights for selected items.
    DumpAttention(DumpAttentionArgs),
    /// Generate a synthetic dataset with known unimodal ceilings.
    GenData(GenDataArgs),
}

/// Outcome of a command that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    /// The command worked but its check failed (gradcheck above tolerance).
    CheckFailed,
}

pub fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Train(a) => train(&a).map(|_| Status::Success),
        Command::Eval(a) => eval(&a).map(|_| Status::Success),
        Command::Ablate(a) => ablate(&a).map(|_| Status::Success),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::DumpAttention(a) => dump_attention(&a).map(|_| Status::Success),
        Command::GenData(a) => gen_data(&a).map(|_| Status::Success),
    }
}

/// Model settings: a JSON spec file, then individual flags on top.
#[derive(Debug, Clone, Default, Args)]
pub struct SpecArgs {
    /// JSON model spec; missing fields take the built-in defaults.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub phase1_lr: Option<f64>,
    #[arg(long)]
    pub phase2_lr: Option<f64>,
    /// Epochs without validation gain before phase 1 ends.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Stop after cross-entropy training.
    #[arg(long)]
    pub no_phase2: bool,
    #[arg(long)]
    pub story_len: Option<usize>,
    #[arg(long)]
    pub sentence_len: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_v: Option<usize>,
    #[arg(long)]
    pub d_word: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_proj: Option<usize>,
    /// Layers per attention stack.
    #[arg(long)]
    pub attn_layers: Option<usize>,
    /// Depth of the residual fusion blocks.
    #[arg(long)]
    pub fusion_depth: Option<usize>,
    /// Train the word embedding table too.
    #[arg(long)]
    pub unfreeze_embeddings: bool,
    #[arg(long)]
    pub no_dropout: bool,
}

impl SpecArgs {
    pub fn is_empty(&self) -> bool {
        self.spec.is_none()
            && self.variant.is_none()
            && self.seed.is_none()
            && self.epochs.is_none()
            && self.batch_size.is_none()
            && self.phase1_lr.is_none()
            && self.phase2_lr.is_none()
            && self.patience.is_none()
            && !self.no_phase2
            && self.story_len.is_none()
            && self.sentence_len.is_none()
            && self.d_model.is_none()
            && self.d_v.is_none()
            && self.d_word.is_none()
            && self.heads.is_none()
            && self.d_proj.is_none()
            && self.attn_layers.is_none()
            && self.fusion_depth.is_none()
            && !self.unfreeze_embeddings
            && !self.no_dropout
    }

    /// Flags over file over defaults.
    pub fn resolve(&self) -> Result<VariantSpec> {
        let mut s = match &self.spec {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing spec {}", path.display()))?
            }
            None => VariantSpec::default(),
        };
        macro_rules! set {
            ($($field:ident <- $flag:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { s.$field = v; })*
            };
        }
        set!(variant <- variant, seed <- seed, epochs <- epochs, batch_size <- batch_size,
             phase1_lr <- phase1_lr, phase2_lr <- phase2_lr, phase1_patience <- patience,
             story_len <- story_len, sentence_len <- sentence_len, d_model <- d_model, d_v <- d_v,
             d_word <- d_word, heads <- heads, d_proj <- d_proj, attn_layers <- attn_layers,
             fusion_depth <- fusion_depth);
        if self.no_phase2 {
            s.phase2 = false;
        }
        if self.unfreeze_embeddings {
            s.freeze_embeddings = false;
        }
        if self.no_dropout {
            s.dropout = mdam::DropoutRates::none();
        }
        s.validate()?;
        Ok(s)
    }
}

/// A dataset path: a JSONL file, or a directory holding `{split}.jsonl`.
pub fn load_split(path: &Path, split: &str) -> Result<Vec<StoryInstance>> {
    let file = if path.is_dir() { path.join(format!("{split}.jsonl")) } else { path.to_path_buf() };
    if !file.exists() {
        bail!("dataset file {} not found", file.display());
    }
    let items = load_dataset(&file).with_context(|| format!("loading {}", file.display()))?;
    if items.is_empty() {
        bail!("dataset {} is empty", file.display());
    }
    Ok(items)
}

/// Number of worker threads for parallel commands.
pub fn thread_count() -> usize {
    std::env::var("MDAM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
