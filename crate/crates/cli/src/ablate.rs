use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Result};
use clap::Args;
use mdam::model::xavier_init;
use mdam::text::prepare_all;
use mdam::train::{evaluate, train, TrainOptions, TrainState};
use mdam::{PreparedStory, Variant, VariantSpec, Vocabulary};

use crate::{load_split, thread_count, SpecArgs};

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: SpecArgs,
    /// Directory with train.jsonl and val.jsonl (test.jsonl is optional).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL.to_vec())]
    pub variants: Vec<Variant>,
    /// Attention stack depths to try.
    #[arg(long = "attn-layer-grid", value_delimiter = ',', default_values_t = vec![1, 2])]
    pub attn_layer_grid: Vec<usize>,
    /// Fusion depths to try.
    #[arg(long = "fusion-depth-grid", value_delimiter = ',', default_values_t = vec![1, 2])]
    pub fusion_depth_grid: Vec<usize>,
    /// Also write the table here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub attn_layers: usize,
    pub fusion_depth: usize,
    pub val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub parameters: usize,
    pub seed: u64,
}

pub const ABLATION_COLUMNS: &str = "variant\tL_attn\tL_m\tval_accuracy\ttest_accuracy\tparameters\tseed";

impl AblationRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.4}\t{}\t{}\t{}",
            self.variant,
            self.attn_layers,
            self.fusion_depth,
            self.val_accuracy,
            self.test_accuracy.map_or("-".to_string(), |a| format!("{a:.4}")),
            self.parameters,
            self.seed
        )
    }
}

struct Sets {
    train: Vec<PreparedStory>,
    val: Vec<PreparedStory>,
    test: Option<Vec<PreparedStory>>,
}

fn run_cell(spec: &VariantSpec, vocab: &Vocabulary, sets: &Sets) -> Result<AblationRow> {
    let params = xavier_init(spec, vocab, spec.seed, None)?;
    let parameters = params.num_scalars();
    let outcome = train(spec, TrainState::new(params, spec), &sets.train, &sets.val, TrainOptions::default())?;
    let best = outcome.best_params();
    let test_accuracy = match &sets.test {
        Some(t) => Some(evaluate(best, spec, t)?.accuracy),
        None => None,
    };
    Ok(AblationRow {
        variant: spec.variant,
        attn_layers: spec.attn_layers,
        fusion_depth: spec.fusion_depth,
        val_accuracy: outcome.state.progress.best_val_accuracy,
        test_accuracy,
        parameters,
        seed: spec.seed,
    })
}

/// Trains every grid cell (on up to `MDAM_THREADS` threads) and returns the
/// rows in grid order.
pub fn ablate(args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let base = args.model.resolve()?;
    let train_items = load_split(&args.data, "train")?;
    let val_items = load_split(&args.data, "val")?;
    let test_path = args.data.join("test.jsonl");
    let vocab = Vocabulary::from_instances(train_items.iter());
    // preparation does not depend on the variant or the depths
    let sets = Sets {
        train: prepare_all(&train_items, &vocab, &base)?,
        val: prepare_all(&val_items, &vocab, &base)?,
        test: if test_path.exists() {
            Some(prepare_all(&load_split(&test_path, "test")?, &vocab, &base)?)
        } else {
            None
        },
    };
    let mut cells = Vec::new();
    for &variant in &args.variants {
        for &attn_layers in &args.attn_layer_grid {
            for &fusion_depth in &args.fusion_depth_grid {
                let spec = VariantSpec {
                    variant,
                    attn_layers,
                    fusion_depth,
                    ..base.clone()
                };
                spec.validate()?;
                cells.push(spec);
            }
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRow>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let workers = thread_count().min(cells.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(spec) = cells.get(i) else { break };
                let row = run_cell(spec, &vocab, &sets);
                results.lock().expect("results lock")[i] = Some(row);
            });
        }
    });

    let mut rows = Vec::with_capacity(cells.len());
    for r in results.into_inner().expect("results lock") {
        rows.push(r.ok_or_else(|| anyhow!("grid cell did not run"))??);
    }
    let mut table = format!("{ABLATION_COLUMNS}\n");
    for r in &rows {
        table.push_str(&r.to_line());
        table.push('\n');
    }
    print!("{table}");
    if let Some(path) = &args.out {
        crate::write_file(path, &table)?;
    }
    Ok(rows)
}
