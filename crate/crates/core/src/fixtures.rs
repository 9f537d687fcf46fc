//! Small hand-written stories for gradient checks, audits and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::VariantSpec;
use crate::data::{tokenize, StoryInstance};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::model::{forward, xavier_init};
use crate::params::ModelParams;
use crate::text::{prepare_story, PreparedStory, Vocabulary};
use crate::train::cross_entropy_loss;

const CAPTIONS: [&str; 5] = [
    "Pororo throws the red ball",
    "Crong laughs at him",
    "She finds 3 cookies",
    "Eddy builds a red sled",
    "they all play outside",
];

/// A story of `len` positions (at most five) with random frame features.
/// Every sentence fits `sentence_len = 8`.
pub fn desk_instance(d_v: usize, len: usize, seed: u64) -> StoryInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = len.clamp(1, CAPTIONS.len());
    StoryInstance {
        qa_id: format!("desk-{seed}"),
        frames: (0..len)
            .map(|_| (0..d_v).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
        captions: CAPTIONS[..len].iter().map(|c| tokenize(c)).collect(),
        question: tokenize("who throws the red ball ?"),
        answers: [
            "Pororo throws it at the tree",
            "Crong throws the red ball",
            "Eddy is the one who throws",
            "the red sled is thrown away",
            "nobody throws anything at all",
        ]
            .iter()
            .map(|a| tokenize(a))
            .collect(),
        correct: 0,
        meta: None,
    }
}

/// Vocabulary of the desk story minus one word, so the unknown-token path
/// is exercised too.
pub fn desk_vocab(inst: &StoryInstance) -> Vocabulary {
    let full = Vocabulary::from_instances([inst]);
    let mut v = Vocabulary::new();
    for t in full.tokens().iter().skip(2).filter(|t| t.as_str() != "nobody") {
        v.add(t);
    }
    v
}

/// Spec, vocabulary, prepared story and fresh parameters for `spec`.
pub fn desk_setup(spec: &VariantSpec, seed: u64) -> Result<(Vocabulary, PreparedStory, ModelParams)> {
    let inst = desk_instance(spec.d_v, spec.story_len.min(4), seed);
    let vocab = desk_vocab(&inst);
    let story = prepare_story(&inst, &vocab, spec)?;
    let params = xavier_init(spec, &vocab, seed, None)?;
    Ok((vocab, story, params))
}

/// Cross-entropy of `story` under `params` in an evaluation graph.
pub fn story_loss(g: &mut Graph, params: &ModelParams, spec: &VariantSpec, story: &PreparedStory) -> Result<Var> {
    let out = forward(g, params, spec, story, None)?;
    cross_entropy_loss(g, out.probs, story.correct)
}

/// Finite-difference check of the full model on the desk story. Dropout is
/// switched off and every parameter, embeddings included, is checked.
pub fn model_gradcheck(spec: &VariantSpec, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let spec = VariantSpec {
        dropout: crate::config::DropoutRates::none(),
        freeze_embeddings: false,
        ..spec.clone()
    };
    let (_, story, mut params) = desk_setup(&spec, opts.seed)?;
    finite_diff_check(|g, p| story_loss(g, p, &spec, &story), &mut params, opts)
}
