//! Variant assembly: parameter initialization and the forward pass from a
//! prepared story to answer scores.

use crate::answer::{init_answer_params, score_answers};
use crate::attention::{aggregate_bank, aggregate_by_conv, attn_layer_stack, AttentionTrace, AttnMode, StackSpec, Stream};
use crate::autodiff::{Graph, Var};
use crate::config::{Variant, VariantSpec};
use crate::error::{MdamError, Result};
use crate::fusion::{fuse, init_fusion_params, FusionInputs};
use crate::layers::Initializer;
use crate::params::ModelParams;
use crate::text::{encode_story, init_text_params, Embeddings, PreparedStory, Vocabulary};

pub const EARLY_FUSION_PATH: &str = "fusion.early.W_e";

/// Streams that run through their own attention stacks.
pub fn streams(variant: Variant) -> &'static [Stream] {
    match variant {
        Variant::FrameOnly => &[Stream::Frame],
        Variant::CaptOnly => &[Stream::Caption],
        Variant::EarlyFusion => &[Stream::Fused],
        _ => &[Stream::Frame, Stream::Caption],
    }
}

/// Creates every parameter of `spec.variant`. Matrices are Xavier-uniform,
/// biases zero, layer-norm gains one; embedding rows found in `pretrained`
/// are copied instead.
pub fn xavier_init(spec: &VariantSpec, vocab: &Vocabulary, seed: u64, pretrained: Option<&Embeddings>) -> Result<ModelParams> {
    spec.validate()?;
    let mut params = ModelParams::new();
    let mut init = Initializer::new(&mut params, seed);
    init_text_params(&mut init, spec, vocab, pretrained)?;
    if spec.variant == Variant::EarlyFusion {
        init.xavier(EARLY_FUSION_PATH, spec.d_v + spec.d_model, spec.d_model);
    }
    for &stream in streams(spec.variant) {
        if spec.variant.uses_self_attention() {
            StackSpec::new(spec, AttnMode::SelfAttention, stream).init(&mut init);
        }
        StackSpec::new(spec, AttnMode::ByQuestion, stream).init(&mut init);
        aggregate_bank(spec, stream).init(&mut init);
    }
    init_fusion_params(&mut init, spec);
    init_answer_params(&mut init, spec.d_model);
    Ok(params)
}

/// Handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub probs: Var,
    /// The fused representation `o` before classifier dropout.
    pub fused: Var,
}

/// Per-position early fusion: `tanh([M_V[i], M_C[i]] W_e)` for each of the
/// `N` positions, with padding rows zeroed afterwards.
fn early_fuse(g: &mut Graph, params: &ModelParams, frames: Var, captions: Var, mask: &[bool]) -> Result<Var> {
    let we = g.param(params, EARLY_FUSION_PATH)?;
    let mut rows = Vec::with_capacity(mask.len());
    for i in 0..mask.len() {
        let f = g.slice_row(frames, i)?;
        let c = g.slice_row(captions, i)?;
        rows.push(g.concat(&[f, c])?);
    }
    let stacked = g.stack_rows(&rows)?;
    let y = g.matmul(stacked, we)?;
    let y = g.tanh(y)?;
    let factors: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    g.scale_rows(y, &factors)
}

/// Runs the variant described by `spec` on one story. Pass a trace to
/// collect every attention row.
pub fn forward(
    g: &mut Graph,
    params: &ModelParams,
    spec: &VariantSpec,
    story: &PreparedStory,
    trace: Option<&mut AttentionTrace>,
) -> Result<ForwardOutput> {
    let mut trace = trace;
    let enc = encode_story(g, params, spec, story)?;
    let mask = enc.story_mask.clone();
    let mut inputs = FusionInputs::default();
    for &stream in streams(spec.variant) {
        let memory = match stream {
            Stream::Frame => enc.frames,
            Stream::Caption => enc.captions,
            Stream::Fused => match (enc.frames, enc.captions) {
                (Some(f), Some(c)) => Some(early_fuse(g, params, f, c, &mask)?),
                _ => None,
            },
        }
        .ok_or_else(|| MdamError::Argument(format!("{} stream missing", stream.name())))?;
        let mut x = memory;
        if spec.variant.uses_self_attention() {
            let stack = StackSpec::new(spec, AttnMode::SelfAttention, stream);
            x = attn_layer_stack(g, params, &stack, x, None, &mask, &mut trace)?;
        }
        let stack = StackSpec::new(spec, AttnMode::ByQuestion, stream);
        x = attn_layer_stack(g, params, &stack, x, Some(enc.question), &mask, &mut trace)?;
        let pooled = aggregate_by_conv(g, params, spec, stream, x, &mask)?;
        match stream {
            Stream::Frame => inputs.v = Some(pooled),
            Stream::Caption => inputs.c = Some(pooled),
            Stream::Fused => inputs.fused = Some(pooled),
        }
    }
    let fused = fuse(g, params, spec, enc.question, inputs)?;
    let o = g.dropout(fused, spec.dropout.classifier)?;
    let scores = score_answers(g, params, o, enc.answers)?;
    Ok(ForwardOutput {
        logits: scores.logits,
        probs: scores.probs,
        fused,
    })
}

/// Number of cross-modal fusion sites in the forward graph of `story`.
pub fn fusion_audit(params: &ModelParams, spec: &VariantSpec, story: &PreparedStory) -> Result<usize> {
    let mut g = Graph::new();
    forward(&mut g, params, spec, story, None)?;
    Ok(g.count_cross_modal_fusions())
}
