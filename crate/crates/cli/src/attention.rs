use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use mdam::answer::predict;
use mdam::attention::{AttentionTrace, AttnMode, Stream};
use mdam::data::Family;
use mdam::model::forward;
use mdam::tensor::argmax;
use mdam::text::prepare_story;
use mdam::{Checkpoint, Graph, PreparedStory};

use crate::load_split;

#[derive(Debug, Clone, Args)]
pub struct DumpAttentionArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// A JSONL file, or a directory whose test.jsonl is used.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Items to dump; repeat the flag for several.
    #[arg(long = "qa-id", value_name = "ID", required_unless_present = "all")]
    pub qa_ids: Vec<String>,
    /// Dump every item of the dataset.
    #[arg(long)]
    pub all: bool,
    /// Directory for the trace files.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// How often the question-attention peak lands on the generator's evidence
/// position, over correctly answered cross-modal items.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvidenceReport {
    pub solved: usize,
    pub frame_hits: usize,
    pub caption_hits: usize,
}

/// Position with the largest question-attention weight in `stream`,
/// averaged over heads of the last layer.
fn peak(trace: &AttentionTrace, stream: Stream, valid: usize) -> Option<usize> {
    let rows: Vec<_> = trace
        .rows
        .iter()
        .filter(|r| r.mode == AttnMode::ByQuestion && r.stream == stream)
        .collect();
    let last = rows.iter().map(|r| r.layer).max()?;
    let mut mean = vec![0.0; valid];
    for r in rows.iter().filter(|r| r.layer == last) {
        for (m, w) in mean.iter_mut().zip(&r.weights) {
            *m += w;
        }
    }
    Some(argmax(&mean))
}

/// Writes `{qa_id}.{self|question}.tsv` per item (frame and caption rows
/// side by side, marked by the stream column) and prints the evidence
/// report for synthetic cross-modal items.
pub fn dump_attention(args: &DumpAttentionArgs) -> Result<EvidenceReport> {
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let items = load_split(&args.data, "test")?;
    let chosen: Vec<_> = if args.all {
        items.iter().collect()
    } else {
        let mut out = Vec::new();
        for id in &args.qa_ids {
            match items.iter().find(|i| &i.qa_id == id) {
                Some(i) => out.push(i),
                None => bail!("no item with qa_id {id}"),
            }
        }
        out
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut report = EvidenceReport::default();
    for inst in chosen {
        let story: PreparedStory = prepare_story(inst, &ck.vocab, &ck.spec)?;
        let mut trace = AttentionTrace::default();
        let mut g = Graph::new();
        let out = forward(&mut g, ck.params(), &ck.spec, &story, Some(&mut trace))?;
        let valid = story.len();
        for mode in [AttnMode::SelfAttention, AttnMode::ByQuestion] {
            let text = trace.to_lines(&story.qa_id, mode, valid);
            if !text.is_empty() {
                let file = args.out.join(format!("{}.{}.tsv", story.qa_id, mode.name()));
                crate::write_file(&file, &text)?;
            }
        }
        let solved = predict(g.value(out.logits).data()) == story.correct;
        if let Some(meta) = story.meta.as_ref().filter(|m| solved && m.family == Family::CrossModal) {
            report.solved += 1;
            if meta.evidence_frame.is_some() && peak(&trace, Stream::Frame, valid) == meta.evidence_frame {
                report.frame_hits += 1;
            }
            if meta.evidence_caption.is_some() && peak(&trace, Stream::Caption, valid) == meta.evidence_caption {
                report.caption_hits += 1;
            }
        }
    }
    if report.solved > 0 {
        let rate = |h: usize| h as f64 / report.solved as f64;
        println!(
            "evidence\tsolved_cross_modal\t{}\tframe_peak_match\t{:.4}\tcaption_peak_match\t{:.4}",
            report.solved,
            rate(report.frame_hits),
            rate(report.caption_hits)
        );
    }
    Ok(report)
}
