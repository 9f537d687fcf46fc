use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use mdam::model::xavier_init;
use mdam::text::{load_embeddings, prepare_all};
use mdam::train::{self as core_train, evaluate, EpochRecord, TrainOptions, TrainState};
use mdam::{Checkpoint, VariantSpec, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::{load_split, SpecArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.mdck";
pub const BEST_FILE: &str = "best.mdck";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const METADATA_FILE: &str = "run.json";

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: SpecArgs,
    /// Directory with train.jsonl and val.jsonl (test.jsonl is optional).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Run directory for checkpoints, metrics and metadata.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Word vectors in text format; without them embeddings start random.
    #[arg(long, value_name = "FILE")]
    pub embeddings: Option<PathBuf>,
    /// Stop after this many epochs in total, leaving a resumable run.
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
}

/// What `run.json` records about a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub spec: VariantSpec,
    pub seed: u64,
    pub data: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub freeze_embeddings: bool,
    pub vocabulary_size: usize,
    pub parameters: usize,
    pub train_items: usize,
    pub val_items: usize,
    pub epochs_run: usize,
    pub finished: bool,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

/// Keeps the header and the lines of epochs before `next_epoch`, so a
/// resumed run does not duplicate lines written after its last checkpoint.
fn trim_metrics(path: &Path, next_epoch: usize) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let kept: Vec<&str> = text
        .lines()
        .filter(|l| match EpochRecord::parse(l) {
            Ok(r) => r.epoch < next_epoch,
            Err(_) => true,
        })
        .collect();
    crate::write_file(path, &(kept.join("\n") + "\n"))
}

pub fn train(args: &TrainArgs) -> Result<RunMetadata> {
    let started = Instant::now();
    let train_items = load_split(&args.data, "train")?;
    let val_items = load_split(&args.data, "val")?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    let metrics_path = args.out.join(METRICS_FILE);

    let (spec, vocab, state) = if args.resume {
        let ck = Checkpoint::load(&ckpt_path).with_context(|| format!("resuming from {}", ckpt_path.display()))?;
        if !args.model.is_empty() {
            let requested = args.model.resolve()?;
            if requested != ck.spec {
                bail!("the requested spec differs from the one stored in {}", ckpt_path.display());
            }
        }
        if metrics_path.exists() {
            trim_metrics(&metrics_path, ck.state.progress.next_epoch)?;
        }
        (ck.spec, ck.vocab, ck.state)
    } else {
        let spec = args.model.resolve()?;
        let vocab = Vocabulary::from_instances(train_items.iter());
        let pretrained = match &args.embeddings {
            Some(p) => Some(load_embeddings(p).with_context(|| format!("loading {}", p.display()))?),
            None => None,
        };
        let params = xavier_init(&spec, &vocab, spec.seed, pretrained.as_ref())?;
        let state = TrainState::new(params, &spec);
        (spec, vocab, state)
    };

    let train_set = prepare_all(&train_items, &vocab, &spec)?;
    let val_set = prepare_all(&val_items, &vocab, &spec)?;

    let mut log = OpenOptions::new()
        .create(true)
        .append(args.resume)
        .write(true)
        .truncate(!args.resume)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let save_spec = spec.clone();
    let save_vocab = vocab.clone();
    let out_dir = args.out.clone();
    let hook = move |state: &TrainState, record: &EpochRecord| -> mdam::Result<()> {
        let ck = Checkpoint::new(save_spec.clone(), save_vocab.clone(), state.clone());
        ck.save(out_dir.join(CHECKPOINT_FILE))?;
        if state.progress.best_epoch == Some(record.epoch) {
            let mut best = ck;
            best.state.params = state.progress.best_params.clone();
            best.save(out_dir.join(BEST_FILE))?;
        }
        Ok(())
    };
    let outcome = core_train::train(
        &spec,
        state,
        &train_set,
        &val_set,
        TrainOptions {
            stop_after: args.stop_after,
            on_epoch: Some(Box::new(hook)),
            log: Some(&mut log),
        },
    )?;
    log.flush()?;

    let state = &outcome.state;
    // also covers runs that had no epoch left to do
    Checkpoint::new(spec.clone(), vocab.clone(), state.clone()).save(&ckpt_path)?;
    let finished = state.finished(&spec);
    let test_path = args.data.join("test.jsonl");
    let test_accuracy = if finished && args.data.is_dir() && test_path.exists() {
        let test = prepare_all(&load_split(&test_path, "test")?, &vocab, &spec)?;
        Some(evaluate(outcome.best_params(), &spec, &test)?.accuracy)
    } else {
        None
    };
    let p = &state.progress;
    let meta = RunMetadata {
        seed: spec.seed,
        data: args.data.clone(),
        embeddings: args.embeddings.clone(),
        freeze_embeddings: spec.freeze_embeddings,
        vocabulary_size: vocab.len(),
        parameters: state.params.num_scalars(),
        train_items: train_set.len(),
        val_items: val_set.len(),
        epochs_run: p.next_epoch,
        finished,
        best_epoch: p.best_epoch,
        best_val_accuracy: p.best_epoch.map(|_| p.best_val_accuracy),
        test_accuracy,
        wall_seconds: started.elapsed().as_secs_f64(),
        spec,
    };
    crate::write_file(&args.out.join(METADATA_FILE), &serde_json::to_string_pretty(&meta)?)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{a:.4}"));
    println!(
        "epochs\t{}\tbest_epoch\t{}\tbest_val_accuracy\t{}\ttest_accuracy\t{}",
        meta.epochs_run,
        meta.best_epoch.map_or("-".to_string(), |e| e.to_string()),
        fmt(meta.best_val_accuracy),
        fmt(meta.test_accuracy)
    );
    Ok(meta)
}
