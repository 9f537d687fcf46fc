//! Stacked multi-head attention over story positions: self-attention, where
//! every position takes a turn as the pivot, and attention by question, where
//! the question vector is the only pivot and the weighted rows are kept
//! instead of summed. A convolution/max-pool over the story axis condenses the
//! result to one vector per stream.

use std::fmt::Write as _;

use crate::autodiff::{Graph, Var};
use crate::config::VariantSpec;
use crate::error::{MdamError, Result};
use crate::layers::{ConvBank, Initializer};
use crate::params::ModelParams;

/// The sequence an attention stack runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Frame,
    Caption,
    /// Frame and caption rows fused per position (early-fusion ablation).
    Fused,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Frame => "frame",
            Stream::Caption => "caption",
            Stream::Fused => "fused",
        }
    }

    /// Row width `d_k` of the stream.
    pub fn width(self, spec: &VariantSpec) -> usize {
        match self {
            Stream::Frame => spec.d_v,
            Stream::Caption | Stream::Fused => spec.d_model,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttnMode {
    SelfAttention,
    ByQuestion,
}

impl AttnMode {
    pub fn name(self) -> &'static str {
        match self {
            AttnMode::SelfAttention => "self",
            AttnMode::ByQuestion => "question",
        }
    }
}

/// Shapes and parameter prefix of one attention stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackSpec {
    pub prefix: String,
    pub mode: AttnMode,
    pub stream: Stream,
    pub d_k: usize,
    /// Width of the pivot fed to `W_p`: `d_k` for self-attention, the
    /// question width for attention by question.
    pub d_pivot: usize,
    pub heads: usize,
    pub d_proj: usize,
    pub layers: usize,
    pub attn_dropout: f64,
    pub ffn_dropout: f64,
}

impl StackSpec {
    pub fn new(spec: &VariantSpec, mode: AttnMode, stream: Stream) -> Self {
        let d_k = stream.width(spec);
        StackSpec {
            prefix: format!("attention.{}.{}", mode.name(), stream.name()),
            mode,
            stream,
            d_k,
            d_pivot: match mode {
                AttnMode::SelfAttention => d_k,
                AttnMode::ByQuestion => spec.d_model,
            },
            heads: spec.heads,
            d_proj: spec.d_proj,
            layers: spec.attn_layers,
            attn_dropout: spec.dropout.attention,
            ffn_dropout: spec.dropout.ffn,
        }
    }

    pub fn path(&self, layer: usize, name: &str) -> String {
        format!("{}.layer{layer}.{name}", self.prefix)
    }

    pub fn pivot_path(&self, layer: usize, head: usize) -> String {
        self.path(layer, &format!("heads.W_p.{head}"))
    }

    pub fn key_path(&self, layer: usize, head: usize) -> String {
        self.path(layer, &format!("heads.W_K.{head}"))
    }

    pub fn init(&self, init: &mut Initializer<'_>) {
        let d = self.d_k;
        for l in 0..self.layers {
            for i in 0..self.heads {
                init.xavier(self.pivot_path(l, i), self.d_pivot, self.d_proj);
                init.xavier(self.key_path(l, i), d, self.d_proj);
            }
            init.xavier(self.path(l, "W_o"), self.heads * self.d_proj, d);
            init.xavier(self.path(l, "ffn.W_1"), d, 2 * d);
            init.zeros(self.path(l, "ffn.b_1"), &[2 * d]);
            init.xavier(self.path(l, "ffn.W_2"), 2 * d, d);
            init.zeros(self.path(l, "ffn.b_2"), &[d]);
            for norm in ["norm1", "norm2"] {
                init.ones(self.path(l, &format!("{norm}.gain")), &[d]);
                init.zeros(self.path(l, &format!("{norm}.bias")), &[d]);
            }
        }
    }
}

/// One stored softmax row.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub mode: AttnMode,
    pub stream: Stream,
    pub layer: usize,
    pub head: usize,
    /// Pivot story position, or `None` when the question is the pivot.
    pub pivot: Option<usize>,
    /// One weight per story position (masked positions are zero).
    pub weights: Vec<f64>,
}

/// Attention weights recorded during one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub rows: Vec<TraceRow>,
}

impl AttentionTrace {
    /// Tab-separated lines `qa_id, stream, layer, head, pivot, weights...`
    /// for the rows of one stack kind. Only the first `valid` positions are
    /// written, and masked pivots are skipped.
    pub fn to_lines(&self, qa_id: &str, mode: AttnMode, valid: usize) -> String {
        let mut out = String::new();
        for r in self.rows.iter().filter(|r| r.mode == mode) {
            if r.pivot.is_some_and(|p| p >= valid) {
                continue;
            }
            let pivot = r.pivot.map_or("q".to_string(), |p| p.to_string());
            let _ = write!(out, "{qa_id}\t{}\t{}\t{}\t{pivot}", r.stream.name(), r.layer, r.head);
            for w in &r.weights[..valid.min(r.weights.len())] {
                let _ = write!(out, "\t{w}");
            }
            out.push('\n');
        }
        out
    }
}

/// Parses one line written by [`AttentionTrace::to_lines`].
pub fn parse_trace_line(line: &str) -> Result<(String, String, usize, usize, Option<usize>, Vec<f64>)> {
    let bad = || MdamError::Format(format!("malformed trace line {line:?}"));
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() < 6 {
        return Err(bad());
    }
    let layer = f[2].parse().map_err(|_| bad())?;
    let head = f[3].parse().map_err(|_| bad())?;
    let pivot = match f[4] {
        "q" => None,
        p => Some(p.parse().map_err(|_| bad())?),
    };
    let weights = f[5..]
        .iter()
        .map(|w| w.parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    Ok((f[0].to_string(), f[1].to_string(), layer, head, pivot, weights))
}

fn inv_sqrt(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

fn mask_factors(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// Scaled dot-product attention of one pivot `x` (`[d_proj]`) over the rows
/// of `y` (`[N×d_proj]`). Returns the weights and the rows of `y` scaled by
/// them; summing those rows gives the usual weighted average.
pub fn dot_prod_attn(g: &mut Graph, x: Var, y: Var, story_mask: &[bool]) -> Result<(Var, Var)> {
    let d = *g.shape(x).last().unwrap_or(&1);
    let yt = g.transpose(y)?;
    let scores = g.matmul(x, yt)?;
    let scores = g.scale(scores, inv_sqrt(d))?;
    let weights = g.softmax(scores, Some(story_mask))?;
    let rows = g.mul_rows(y, weights)?;
    Ok((weights, rows))
}

fn record(trace: &mut Option<&mut AttentionTrace>, g: &Graph, weights: Var, stack: &StackSpec, layer: usize, head: usize) {
    let Some(t) = trace.as_deref_mut() else { return };
    let w = g.value(weights);
    match stack.mode {
        AttnMode::ByQuestion => t.rows.push(TraceRow {
            mode: stack.mode,
            stream: stack.stream,
            layer,
            head,
            pivot: None,
            weights: w.data().to_vec(),
        }),
        AttnMode::SelfAttention => {
            for p in 0..w.rows() {
                t.rows.push(TraceRow {
                    mode: stack.mode,
                    stream: stack.stream,
                    layer,
                    head,
                    pivot: Some(p),
                    weights: w.row(p).to_vec(),
                });
            }
        }
    }
}

/// Every story position of `k` (`[N×d_k]`) acts as pivot over the same `k`.
/// All pivots are computed in one matrix product per head, which is the same
/// as running [`dot_prod_attn`] once per row. Masked rows come out zero.
pub fn multi_head_self_attn(
    g: &mut Graph,
    params: &ModelParams,
    stack: &StackSpec,
    layer: usize,
    k: Var,
    story_mask: &[bool],
    trace: &mut Option<&mut AttentionTrace>,
) -> Result<Var> {
    let mut heads = Vec::with_capacity(stack.heads);
    for i in 0..stack.heads {
        let wp = g.param(params, &stack.pivot_path(layer, i))?;
        let wk = g.param(params, &stack.key_path(layer, i))?;
        let pivots = g.matmul(k, wp)?;
        let keys = g.matmul(k, wk)?;
        let keys_t = g.transpose(keys)?;
        let scores = g.matmul(pivots, keys_t)?;
        let scores = g.scale(scores, inv_sqrt(stack.d_proj))?;
        let weights = g.softmax(scores, Some(story_mask))?;
        record(trace, g, weights, stack, layer, i);
        let weights = g.dropout(weights, stack.attn_dropout)?;
        heads.push(g.matmul(weights, keys)?);
    }
    let cat = g.concat(&heads)?;
    let wo = g.param(params, &stack.path(layer, "W_o"))?;
    let out = g.matmul(cat, wo)?;
    g.scale_rows(out, &mask_factors(story_mask))
}

/// The question `q` is the single pivot; each head keeps its weighted rows
/// (`[N×d_proj]`) rather than summing them.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_question_attn(
    g: &mut Graph,
    params: &ModelParams,
    stack: &StackSpec,
    layer: usize,
    k: Var,
    q: Var,
    story_mask: &[bool],
    trace: &mut Option<&mut AttentionTrace>,
) -> Result<Var> {
    if g.shape(q) != [stack.d_pivot] {
        return Err(MdamError::dim("question pivot", g.shape(q), &[stack.d_pivot]));
    }
    let mut heads = Vec::with_capacity(stack.heads);
    for i in 0..stack.heads {
        let wp = g.param(params, &stack.pivot_path(layer, i))?;
        let wk = g.param(params, &stack.key_path(layer, i))?;
        let pivot = g.matmul(q, wp)?;
        let keys = g.matmul(k, wk)?;
        let keys_t = g.transpose(keys)?;
        let scores = g.matmul(pivot, keys_t)?;
        let scores = g.scale(scores, inv_sqrt(stack.d_proj))?;
        let weights = g.softmax(scores, Some(story_mask))?;
        record(trace, g, weights, stack, layer, i);
        let weights = g.dropout(weights, stack.attn_dropout)?;
        heads.push(g.mul_rows(keys, weights)?);
    }
    let cat = g.concat(&heads)?;
    let wo = g.param(params, &stack.path(layer, "W_o"))?;
    let out = g.matmul(cat, wo)?;
    g.scale_rows(out, &mask_factors(story_mask))
}

/// Point-wise feed-forward network `relu(x W_1 + b_1) W_2 + b_2`.
pub fn feed_forward(g: &mut Graph, params: &ModelParams, stack: &StackSpec, layer: usize, x: Var) -> Result<Var> {
    let w1 = g.param(params, &stack.path(layer, "ffn.W_1"))?;
    let b1 = g.param(params, &stack.path(layer, "ffn.b_1"))?;
    let w2 = g.param(params, &stack.path(layer, "ffn.W_2"))?;
    let b2 = g.param(params, &stack.path(layer, "ffn.b_2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let y = g.matmul(h, w2)?;
    g.add_row(y, b2)
}

fn residual_norm(
    g: &mut Graph,
    params: &ModelParams,
    stack: &StackSpec,
    layer: usize,
    norm: &str,
    x: Var,
    update: Var,
    story_mask: &[bool],
) -> Result<Var> {
    let gain = g.param(params, &stack.path(layer, &format!("{norm}.gain")))?;
    let bias = g.param(params, &stack.path(layer, &format!("{norm}.bias")))?;
    let sum = g.add(x, update)?;
    let y = g.layer_norm(sum, gain, bias)?;
    g.scale_rows(y, &mask_factors(story_mask))
}

/// Runs `stack.layers` layers of attention and feed-forward sub-layers, each
/// wrapped in a residual connection and layer normalization. Padding rows
/// are held at zero throughout.
pub fn attn_layer_stack(
    g: &mut Graph,
    params: &ModelParams,
    stack: &StackSpec,
    k0: Var,
    q: Option<Var>,
    story_mask: &[bool],
    trace: &mut Option<&mut AttentionTrace>,
) -> Result<Var> {
    if g.shape(k0) != [story_mask.len(), stack.d_k] {
        return Err(MdamError::dim(
            "attention stack input",
            g.shape(k0),
            &[story_mask.len(), stack.d_k],
        ));
    }
    let mut x = k0;
    for l in 0..stack.layers {
        let attn = match (stack.mode, q) {
            (AttnMode::SelfAttention, _) => multi_head_self_attn(g, params, stack, l, x, story_mask, trace)?,
            (AttnMode::ByQuestion, Some(q)) => multi_head_question_attn(g, params, stack, l, x, q, story_mask, trace)?,
            (AttnMode::ByQuestion, None) => {
                return Err(MdamError::Argument("attention by question needs a question vector".into()))
            }
        };
        x = residual_norm(g, params, stack, l, "norm1", x, attn, story_mask)?;
        let ff = feed_forward(g, params, stack, l, x)?;
        let ff = g.dropout(ff, stack.ffn_dropout)?;
        x = residual_norm(g, params, stack, l, "norm2", x, ff, story_mask)?;
    }
    Ok(x)
}

/// Filter bank condensing a `[N×d_k]` stream into `d_model` values.
pub fn aggregate_bank(spec: &VariantSpec, stream: Stream) -> ConvBank {
    ConvBank::new(
        format!("attention.aggregate.{}", stream.name()),
        &spec.windows,
        stream.width(spec),
        spec.filters_per_window(),
    )
}

/// Convolution and max-pool over the story axis, skipping padding.
pub fn aggregate_by_conv(
    g: &mut Graph,
    params: &ModelParams,
    spec: &VariantSpec,
    stream: Stream,
    mq: Var,
    story_mask: &[bool],
) -> Result<Var> {
    aggregate_bank(spec, stream).apply(g, params, mq, story_mask)
}
