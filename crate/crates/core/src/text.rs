//! Sentence encoding: word features (embedding + learnable position + casing
//! flags) followed by a shared convolution/max-pool encoder, and assembly of
//! the per-story memory tensors.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Modality, Var};
use crate::config::VariantSpec;
use crate::data::{ItemMeta, StoryInstance, ANSWER_COUNT};
use crate::error::{MdamError, Result};
use crate::layers::{xavier_bound, ConvBank, Initializer};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const CASING_FLAGS: usize = 5;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Personal pronouns recognised by the pronoun flag (matched ignoring case).
pub const PRONOUNS: [&str; 12] = [
    "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us", "them",
];

pub const EMBEDDING_PATH: &str = "text.embedding";
pub const UNK_PATH: &str = "text.unk";
pub const CONV_PREFIX: &str = "text.conv";

/// Lower-cased token inventory. Index 0 is padding and index 1 stands for
/// unknown tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new()
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary::from(vec!["<pad>".to_string(), "<unk>".to_string()])
    }

    /// Every token of the given stories, in first-seen order.
    pub fn from_instances<'a>(items: impl IntoIterator<Item = &'a StoryInstance>) -> Self {
        let mut v = Vocabulary::new();
        for inst in items {
            for s in inst.captions.iter().chain([&inst.question]).chain(&inst.answers) {
                for t in s {
                    v.add(t);
                }
            }
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        let key = token.to_lowercase();
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        self.tokens.push(key.clone());
        self.index.insert(key, self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    /// Row of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Pretrained vectors read from a word-vector text file.
#[derive(Clone, Debug, Default)]
pub struct Embeddings {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

/// Reads `token v1 v2 ...` lines. Every line must have the same width.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Embeddings> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| MdamError::io(path, e))?;
    let mut out = Embeddings::default();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MdamError::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|e| MdamError::Format(format!("{}:{}: {e}", path.display(), n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if out.dim == 0 {
            out.dim = values.len();
        } else if values.len() != out.dim {
            return Err(MdamError::Format(format!(
                "{}:{}: {} values, expected {}",
                path.display(),
                n + 1,
                values.len(),
                out.dim
            )));
        }
        out.vectors.insert(token.to_lowercase(), values);
    }
    Ok(out)
}

/// The five binary flags for every token of `sentence`: capitalization,
/// numeric, personal pronoun, unigram match and bigram match against the
/// paired sentences. Matching ignores case.
pub fn casing_flags(sentence: &[String], paired: &[&[String]]) -> Vec<[f64; CASING_FLAGS]> {
    let lower = |s: &[String]| s.iter().map(|t| t.to_lowercase()).collect::<Vec<_>>();
    let mut unigrams = HashSet::new();
    let mut bigrams = HashSet::new();
    for p in paired {
        let p = lower(p);
        for w in p.windows(2) {
            bigrams.insert((w[0].clone(), w[1].clone()));
        }
        unigrams.extend(p);
    }
    let words = lower(sentence);
    sentence
        .iter()
        .enumerate()
        .map(|(i, tok)| {
            let flag = |b: bool| if b { 1.0 } else { 0.0 };
            let bigram = words
                .get(i + 1)
                .is_some_and(|next| bigrams.contains(&(words[i].clone(), next.clone())));
            [
                flag(tok.chars().any(char::is_uppercase)),
                flag(tok.chars().any(|c| c.is_numeric())),
                flag(PRONOUNS.contains(&words[i].as_str())),
                flag(unigrams.contains(&words[i])),
                flag(bigram),
            ]
        })
        .collect()
}

/// A tokenized sentence resolved against the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSentence {
    pub ids: Vec<usize>,
    pub unknown: Vec<bool>,
    pub casing: Vec<[f64; CASING_FLAGS]>,
}

impl PreparedSentence {
    pub fn new(tokens: &[String], vocab: &Vocabulary, paired: &[&[String]]) -> Self {
        let ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
        let unknown = ids.iter().map(|&i| i == UNK).collect();
        PreparedSentence {
            ids,
            unknown,
            casing: casing_flags(tokens, paired),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A story with every parameter-free preprocessing step done: tokens mapped
/// to rows, casing flags computed, frames copied out.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedStory {
    pub qa_id: String,
    pub frames: Vec<Vec<f64>>,
    pub captions: Vec<PreparedSentence>,
    /// Question flags matched against captions and answers.
    pub question: PreparedSentence,
    /// Question flags matched against answers only, for models that must not
    /// see captions.
    pub question_without_captions: PreparedSentence,
    pub answers: Vec<PreparedSentence>,
    pub correct: usize,
    pub meta: Option<ItemMeta>,
}

impl PreparedStory {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn story_mask(&self, n: usize) -> Vec<bool> {
        (0..n).map(|i| i < self.captions.len()).collect()
    }
}

/// Validates an instance against the spec limits and resolves its tokens.
/// Over-long stories or sentences are errors; truncation is the caller's job.
pub fn prepare_story(inst: &StoryInstance, vocab: &Vocabulary, spec: &VariantSpec) -> Result<PreparedStory> {
    inst.validate()?;
    if inst.answers.len() != ANSWER_COUNT {
        return Err(MdamError::Schema {
            qa_id: inst.qa_id.clone(),
            field: "answers".into(),
            reason: format!("expected {ANSWER_COUNT} answers"),
        });
    }
    if inst.captions.len() > spec.story_len {
        return Err(MdamError::TooLong {
            what: format!("story {}", inst.qa_id),
            len: inst.captions.len(),
            limit: spec.story_len,
        });
    }
    if let Some(f) = inst.frames.first() {
        if f.len() != spec.d_v {
            return Err(MdamError::Config(format!(
                "{}: frame width {} does not match d_v {}",
                inst.qa_id,
                f.len(),
                spec.d_v
            )));
        }
    }
    let check_len = |what: String, s: &[String]| {
        if s.len() > spec.sentence_len {
            Err(MdamError::TooLong {
                what,
                len: s.len(),
                limit: spec.sentence_len,
            })
        } else {
            Ok(())
        }
    };
    for (i, c) in inst.captions.iter().enumerate() {
        check_len(format!("{} caption {i}", inst.qa_id), c)?;
    }
    check_len(format!("{} question", inst.qa_id), &inst.question)?;
    for (i, a) in inst.answers.iter().enumerate() {
        check_len(format!("{} answer {i}", inst.qa_id), a)?;
    }

    let q: &[String] = &inst.question;
    let answer_refs: Vec<&[String]> = inst.answers.iter().map(Vec::as_slice).collect();
    let mut q_context: Vec<&[String]> = inst.captions.iter().map(Vec::as_slice).collect();
    q_context.extend(&answer_refs);
    Ok(PreparedStory {
        qa_id: inst.qa_id.clone(),
        frames: inst.frames.clone(),
        captions: inst
            .captions
            .iter()
            .map(|c| PreparedSentence::new(c, vocab, &[q]))
            .collect(),
        question: PreparedSentence::new(q, vocab, &q_context),
        question_without_captions: PreparedSentence::new(q, vocab, &answer_refs),
        answers: inst
            .answers
            .iter()
            .map(|a| PreparedSentence::new(a, vocab, &[q]))
            .collect(),
        correct: inst.correct,
        meta: inst.meta.clone(),
    })
}

pub fn prepare_all(items: &[StoryInstance], vocab: &Vocabulary, spec: &VariantSpec) -> Result<Vec<PreparedStory>> {
    items.iter().map(|i| prepare_story(i, vocab, spec)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SentenceKind {
    Caption,
    Question,
    Answer,
}

impl SentenceKind {
    fn modality(self) -> Modality {
        match self {
            SentenceKind::Caption => Modality::CAPTION,
            SentenceKind::Question => Modality::QUESTION,
            SentenceKind::Answer => Modality::ANSWER,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SentenceKind::Caption => "caption",
            SentenceKind::Question => "question",
            SentenceKind::Answer => "answer",
        }
    }
}

pub fn position_path(spec: &VariantSpec, kind: SentenceKind) -> String {
    if spec.shared_positional {
        "text.position".to_string()
    } else {
        format!("text.position.{}", kind.name())
    }
}

pub fn sentence_bank(spec: &VariantSpec) -> ConvBank {
    ConvBank::new(CONV_PREFIX, &spec.windows, spec.word_feature_dim(), spec.filters_per_window())
}

/// Registers the embedding table, the unknown-token row, the positional
/// table(s) and the shared sentence filters. Rows found in `pretrained` are
/// copied; the rest are drawn in the Xavier range. The padding row is zero.
pub fn init_text_params(
    init: &mut Initializer<'_>,
    spec: &VariantSpec,
    vocab: &Vocabulary,
    pretrained: Option<&Embeddings>,
) -> Result<()> {
    if let Some(p) = pretrained {
        if p.dim != spec.d_word {
            return Err(MdamError::Config(format!(
                "embedding file has width {}, spec expects d_word {}",
                p.dim, spec.d_word
            )));
        }
    }
    let (v, d) = (vocab.len(), spec.d_word);
    let bound = xavier_bound(v, d);
    let mut table = vec![0.0; v * d];
    for (i, tok) in vocab.tokens().iter().enumerate() {
        if i == PAD || i == UNK {
            continue;
        }
        let row = &mut table[i * d..(i + 1) * d];
        match pretrained.and_then(|p| p.vectors.get(tok)) {
            Some(vec) => row.copy_from_slice(vec),
            None => row
                .iter_mut()
                .for_each(|x| *x = rand::Rng::random_range(init.rng(), -bound..=bound)),
        }
    }
    init.tensor(EMBEDDING_PATH, Tensor::matrix(v, d, table)?, spec.freeze_embeddings);
    let unk = (0..d)
        .map(|_| rand::Rng::random_range(init.rng(), -bound..=bound))
        .collect();
    init.tensor(UNK_PATH, Tensor::vector(unk)?, false);

    let kinds: &[SentenceKind] = if spec.shared_positional {
        &[SentenceKind::Caption]
    } else {
        &[SentenceKind::Caption, SentenceKind::Question, SentenceKind::Answer]
    };
    for &k in kinds {
        init.xavier(position_path(spec, k), spec.sentence_len, d);
    }
    sentence_bank(spec).init(init);
    Ok(())
}

/// Word-level features `[M × (d_word + 5)]`: row `i` of a real word is
/// `concat(embedding_i + position_i, casing_i)`; padding rows are zero.
pub fn word_features(
    g: &mut Graph,
    params: &ModelParams,
    spec: &VariantSpec,
    sentence: &PreparedSentence,
    kind: SentenceKind,
) -> Result<Var> {
    let m = spec.sentence_len;
    let len = sentence.len();
    if len > m {
        return Err(MdamError::TooLong {
            what: format!("{} sentence", kind.name()),
            len,
            limit: m,
        });
    }
    if len == 0 {
        return Err(MdamError::EmptySequence(format!("empty {} sentence", kind.name())));
    }
    let mut ids = sentence.ids.clone();
    ids.resize(m, PAD);
    let table = g.param(params, EMBEDDING_PATH)?;
    let mut emb = g.gather(table, &ids)?;
    if sentence.unknown.iter().any(|&u| u) {
        let unk = g.param(params, UNK_PATH)?;
        let tiled = g.tile_rows(unk, m)?;
        let mut flags: Vec<f64> = sentence.unknown.iter().map(|&u| if u { 1.0 } else { 0.0 }).collect();
        flags.resize(m, 0.0);
        let unk_rows = g.scale_rows(tiled, &flags)?;
        emb = g.add(emb, unk_rows)?;
    }
    let pos_table = g.param(params, &position_path(spec, kind))?;
    let positions: Vec<usize> = (0..m).collect();
    let pos = g.gather(pos_table, &positions)?;
    let summed = g.add(emb, pos)?;
    let mask: Vec<f64> = (0..m).map(|i| if i < len { 1.0 } else { 0.0 }).collect();
    let embedded = g.scale_rows(summed, &mask)?;
    let mut casing = vec![0.0; m * CASING_FLAGS];
    for (i, flags) in sentence.casing.iter().enumerate() {
        casing[i * CASING_FLAGS..(i + 1) * CASING_FLAGS].copy_from_slice(flags);
    }
    let casing = g.input(Tensor::matrix(m, CASING_FLAGS, casing)?, kind.modality());
    g.concat(&[embedded, casing])
}

/// Encodes one sentence to `d_model` values with the shared filters.
pub fn sentence_encode(
    g: &mut Graph,
    params: &ModelParams,
    spec: &VariantSpec,
    sentence: &PreparedSentence,
    kind: SentenceKind,
) -> Result<Var> {
    let words = word_features(g, params, spec, sentence, kind)?;
    let mask: Vec<bool> = (0..spec.sentence_len).map(|i| i < sentence.len()).collect();
    sentence_bank(spec).apply(g, params, words, &mask)
}

/// Long-term memory of one story.
#[derive(Clone, Debug)]
pub struct EncodedStory {
    /// `[N × d_v]` frame features, zero rows on padding.
    pub frames: Option<Var>,
    /// `[N × d_model]` caption encodings, zero rows on padding.
    pub captions: Option<Var>,
    /// `[d_model]`
    pub question: Var,
    /// `[5 × d_model]`
    pub answers: Var,
    pub story_mask: Vec<bool>,
}

/// Builds the memory tensors of a story inside `g`. Streams the variant does
/// not use are skipped entirely.
pub fn encode_story(g: &mut Graph, params: &ModelParams, spec: &VariantSpec, story: &PreparedStory) -> Result<EncodedStory> {
    let n = spec.story_len;
    if story.len() > n {
        return Err(MdamError::TooLong {
            what: format!("story {}", story.qa_id),
            len: story.len(),
            limit: n,
        });
    }
    let story_mask = story.story_mask(n);
    let variant = spec.variant;

    let frames = if variant.uses_frames() {
        let mut data = vec![0.0; n * spec.d_v];
        for (i, f) in story.frames.iter().enumerate() {
            if f.len() != spec.d_v {
                return Err(MdamError::dim("frames", &[f.len()], &[spec.d_v]));
            }
            data[i * spec.d_v..(i + 1) * spec.d_v].copy_from_slice(f);
        }
        Some(g.input(Tensor::matrix(n, spec.d_v, data)?, Modality::FRAME))
    } else {
        None
    };

    let captions = if variant.uses_captions() {
        let mut rows = Vec::with_capacity(n);
        for c in &story.captions {
            rows.push(sentence_encode(g, params, spec, c, SentenceKind::Caption)?);
        }
        for _ in story.len()..n {
            rows.push(g.input(Tensor::zeros(&[spec.d_model]), Modality::CAPTION));
        }
        Some(g.stack_rows(&rows)?)
    } else {
        None
    };

    let q_sentence = if variant.uses_captions() {
        &story.question
    } else {
        &story.question_without_captions
    };
    let question = sentence_encode(g, params, spec, q_sentence, SentenceKind::Question)?;

    let mut answers = Vec::with_capacity(ANSWER_COUNT);
    for a in &story.answers {
        answers.push(sentence_encode(g, params, spec, a, SentenceKind::Answer)?);
    }
    let answers = g.stack_rows(&answers)?;
    Ok(EncodedStory {
        frames,
        captions,
        question,
        answers,
        story_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn definitional_flags() {
        let f = casing_flags(&toks("She saw 42nd street"), &[]);
        assert_eq!(&f[0][..3], &[1.0, 0.0, 1.0]);
        assert_eq!(f[2][1], 1.0);
        assert_eq!(f[1], [0.0; 5]);
    }

    #[test]
    fn unigram_and_bigram_matches_against_question() {
        let q = toks("who holds the red ball");
        let caption = toks("Pororo kicks the Red ball away");
        let f = casing_flags(&caption, &[&q]);
        // "the", "Red", "ball" appear in the question
        assert_eq!(f.iter().map(|r| r[3]).collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        // "the red" and "red ball" are shared bigrams
        assert_eq!(f.iter().map(|r| r[4]).collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn vocabulary_reserves_pad_and_unk() {
        let mut v = Vocabulary::new();
        assert_eq!(v.add("Ball"), 2);
        assert_eq!(v.id("ball"), 2);
        assert_eq!(v.id("kite"), UNK);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
