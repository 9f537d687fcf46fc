use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use mdam::answer::predict;
use mdam::data::ANSWER_COUNT;
use mdam::text::prepare_all;
use mdam::train::{evaluate_parallel, Evaluation, Prediction};
use mdam::Checkpoint;

use crate::{load_split, thread_count, SpecArgs};

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint to score; repeat the flag to average an ensemble.
    #[arg(long, value_name = "FILE", required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// A JSONL file, or a directory whose test.jsonl is used.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Per-item prediction file: qa_id, predicted index, probabilities.
    #[arg(long, value_name = "FILE")]
    pub predictions: Option<PathBuf>,
    /// Require every checkpoint to match this spec's parameter shapes.
    #[command(flatten)]
    pub model: SpecArgs,
}

pub fn eval(args: &EvalArgs) -> Result<Evaluation> {
    let items = load_split(&args.data, "test")?;
    let expected = if args.model.is_empty() { None } else { Some(args.model.resolve()?) };
    let threads = thread_count();
    let mut runs = Vec::with_capacity(args.checkpoint.len());
    for path in &args.checkpoint {
        let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(spec) = &expected {
            ck.check_against(spec)
                .with_context(|| format!("{} does not fit the requested spec", path.display()))?;
        }
        let prepared = prepare_all(&items, &ck.vocab, &ck.spec)?;
        runs.push(evaluate_parallel(ck.params(), &ck.spec, &prepared, threads)?);
    }
    let result = if runs.len() == 1 { runs.pop().expect("one run") } else { average(&runs)? };
    if let Some(path) = &args.predictions {
        let mut text = String::new();
        for p in &result.predictions {
            text.push_str(&p.to_line());
            text.push('\n');
        }
        crate::write_file(path, &text)?;
    }
    println!("accuracy\t{:.4}\titems\t{}\tmodels\t{}", result.accuracy, result.predictions.len(), args.checkpoint.len());
    Ok(result)
}

/// Mean probabilities and logits over models; the prediction is the argmax
/// of the mean probabilities.
fn average(runs: &[Evaluation]) -> Result<Evaluation> {
    let n = runs[0].predictions.len();
    let k = runs.len() as f64;
    let mut predictions = Vec::with_capacity(n);
    let mut hits = 0;
    for i in 0..n {
        let first = &runs[0].predictions[i];
        let mut probs = [0.0; ANSWER_COUNT];
        let mut logits = [0.0; ANSWER_COUNT];
        for run in runs {
            let p = &run.predictions[i];
            if p.qa_id != first.qa_id {
                bail!("ensemble members disagree on item order");
            }
            for j in 0..ANSWER_COUNT {
                probs[j] += p.probs[j] / k;
                logits[j] += p.logits[j] / k;
            }
        }
        let predicted = predict(&probs);
        hits += usize::from(predicted == first.correct);
        predictions.push(Prediction {
            qa_id: first.qa_id.clone(),
            predicted,
            correct: first.correct,
            probs,
            logits,
        });
    }
    Ok(Evaluation {
        accuracy: hits as f64 / n as f64,
        predictions,
    })
}
