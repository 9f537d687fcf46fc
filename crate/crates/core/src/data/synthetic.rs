//! Synthetic multimodal stories with known answer provenance.
//!
//! Every story position pairs a caption ("Pororo talks about the kite") with
//! a frame vector built from a location prototype plus a color prototype plus
//! Gaussian noise. Who talked about what lives only in captions; which
//! location had which color lives only in frames. Three question families
//! probe captions, frames, or both:
//!
//! * caption-answerable: "what did Pororo talk about ?" → an object
//! * frame-answerable: "what color was the lake ?" → a color
//! * cross-modal: "what color was the lake and what did Pororo talk about ?"
//!   → "red kite"; both facts sit at the same story position.
//!
//! Cross-modal answer sets form the grid `{c*, c₂} × {o*, o₂}` plus one
//! `(c₃, o₃)` pair, so a single modality narrows the choice to two. The
//! generator scores every item with exact Bayes posteriors for a frame-only
//! and a caption-only observer by enumerating the answer-drawing process.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Family, ItemMeta, StoryInstance, ANSWER_COUNT};
use crate::error::{MdamError, Result};

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Concept inventories and noise settings of a synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWorldSpec {
    pub characters: Vec<String>,
    pub objects: Vec<String>,
    pub colors: Vec<String>,
    pub locations: Vec<String>,
    /// Frame feature width.
    pub d_v: usize,
    /// Standard deviation of the per-entry frame noise.
    pub noise: f64,
    pub min_story: usize,
    pub max_story: usize,
    /// Proportions of caption-answerable, frame-answerable and cross-modal
    /// questions.
    pub family_mix: [f64; 3],
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        SyntheticWorldSpec {
            characters: words(&["Pororo", "Crong", "Eddy", "Loopy", "Poby", "Petty", "Harry", "Rody"]),
            objects: words(&["ball", "cake", "book", "kite", "hat", "sled", "cookie", "fish", "drum", "boat"]),
            colors: words(&[
                "red", "blue", "green", "yellow", "purple", "orange", "white", "black", "pink", "brown",
            ]),
            locations: words(&["house", "forest", "lake", "beach", "cave", "field", "garden", "hill"]),
            d_v: 64,
            noise: 0.3,
            min_story: 5,
            max_story: 8,
            family_mix: [0.25, 0.25, 0.5],
        }
    }
}

/// Distractors of a single-value answer drawn from the story's other values.
pub const IN_STORY: usize = 2;
/// Distractors of a single-value answer drawn from values absent from the
/// story.
pub const OFF_STORY: usize = 2;
const _: () = assert!(IN_STORY + OFF_STORY == ANSWER_COUNT - 1);

const CAPTION_TEMPLATES: [&str; 4] = [
    "{c} talks about the {o} .",
    "{c} says : i like the {o} !",
    "{c} wants to play with the {o} .",
    "look , {c} found the {o} .",
];

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MdamError::Config(m));
        if self.min_story < IN_STORY + 1 || self.max_story < self.min_story {
            return fail(format!(
                "story length range {}..={} must start at {} or more",
                self.min_story,
                self.max_story,
                IN_STORY + 1
            ));
        }
        for (name, inv, spare) in [
            ("characters", &self.characters, 0),
            ("objects", &self.objects, OFF_STORY),
            ("colors", &self.colors, OFF_STORY),
            ("locations", &self.locations, 0),
        ] {
            if inv.len() < self.max_story + spare {
                return fail(format!(
                    "{} {name} cannot fill stories of {} positions with distinct values and leave {spare} unused",
                    inv.len(),
                    self.max_story
                ));
            }
            let distinct: HashSet<&String> = inv.iter().collect();
            if distinct.len() != inv.len() {
                return fail(format!("duplicate entries in {name}"));
            }
        }
        if self.d_v < 2 {
            return fail("d_v must be at least 2".into());
        }
        if self.family_mix.iter().any(|&p| p < 0.0) || self.family_mix.iter().sum::<f64>() <= 0.0 {
            return fail(format!("invalid family mix {:?}", self.family_mix));
        }
        Ok(())
    }
}

/// Frame prototypes shared by every split of one world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub spec: SyntheticWorldSpec,
    pub color_prototypes: Vec<Vec<f64>>,
    pub location_prototypes: Vec<Vec<f64>>,
}

impl World {
    pub fn new(spec: SyntheticWorldSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_3041d);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut protos = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..spec.d_v).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        };
        let color_prototypes = protos(spec.colors.len());
        let location_prototypes = protos(spec.locations.len());
        Ok(World {
            spec,
            color_prototypes,
            location_prototypes,
        })
    }
}

/// Hidden attribute values of one story, as inventory indices.
#[derive(Clone, Debug, PartialEq)]
pub struct StoryFacts {
    pub characters: Vec<usize>,
    pub objects: Vec<usize>,
    pub colors: Vec<usize>,
    pub locations: Vec<usize>,
}

/// What one observer knows about an answer attribute.
#[derive(Clone, Copy, Debug)]
pub enum Knowledge<'a> {
    /// The observer sees the story's values and which one is the target.
    Known {
        target: &'a str,
        story: &'a [String],
        inventory: &'a [String],
    },
    /// The observer sees nothing of this attribute. The story is then a
    /// uniform random subset of the inventory, so every value is
    /// exchangeable and story membership carries no information.
    Hidden { inventory: &'a [String] },
}

impl<'a> Knowledge<'a> {
    fn targets(&self) -> Vec<&'a str> {
        match *self {
            Knowledge::Known { target, .. } => vec![target],
            Knowledge::Hidden { inventory } => inventory.iter().map(String::as_str).collect(),
        }
    }

    /// Values an in-story distractor may take once `target` is fixed.
    fn in_story(&self, target: &str) -> Vec<&'a str> {
        let values = match *self {
            Knowledge::Known { story, .. } => story,
            Knowledge::Hidden { inventory } => inventory,
        };
        values.iter().map(String::as_str).filter(|v| *v != target).collect()
    }

    /// Values an off-story distractor may take once `target` and the
    /// in-story distractors `taken` are fixed.
    fn off_story(&self, target: &str, taken: &[&str]) -> Vec<&'a str> {
        match *self {
            Knowledge::Known { story, inventory, .. } => inventory
                .iter()
                .filter(|v| !story.contains(v))
                .map(String::as_str)
                .collect(),
            Knowledge::Hidden { inventory } => inventory
                .iter()
                .map(String::as_str)
                .filter(|v| *v != target && !taken.contains(v))
                .collect(),
        }
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Posterior over which of the five single-value answers is correct. The
/// answer process draws the target, then [`IN_STORY`] distractors uniformly
/// from the story's other values and [`OFF_STORY`] from values absent from
/// the story, then shuffles. Every hypothesis has equal weight, so the
/// posterior is a normalized count.
pub fn single_posterior(k: Knowledge<'_>, answers: &[String]) -> [f64; ANSWER_COUNT] {
    let observed: HashSet<&str> = answers.iter().map(String::as_str).collect();
    let mut post = [0.0; ANSWER_COUNT];
    for target in k.targets() {
        let Some(slot) = answers.iter().position(|a| a == target) else { continue };
        let inside = k.in_story(target);
        for a in combinations(inside.len(), IN_STORY) {
            let taken: Vec<&str> = a.iter().map(|&i| inside[i]).collect();
            if !taken.iter().all(|v| observed.contains(v)) {
                continue;
            }
            let outside = k.off_story(target, &taken);
            for b in combinations(outside.len(), OFF_STORY) {
                if b.iter().all(|&i| observed.contains(outside[i])) {
                    post[slot] += 1.0;
                }
            }
        }
    }
    normalize(post)
}

/// Posterior for cross-modal answers `(color, object)`: the grid
/// `{c*, c₂} × {o*, o₂} ∪ {(c₃, o₃)}` where `c₂, o₂` are other story values
/// and `c₃, o₃` are absent from the story. Hypotheses are enumerated over
/// `(c*, c₂, c₃, o*, o₂, o₃)`, all equally likely.
pub fn pair_posterior(colors: Knowledge<'_>, objects: Knowledge<'_>, answers: &[(String, String)]) -> [f64; ANSWER_COUNT] {
    let observed: HashSet<(&str, &str)> = answers.iter().map(|(c, o)| (c.as_str(), o.as_str())).collect();
    let has = |c: &str, o: &str| observed.contains(&(c, o));
    let mut post = [0.0; ANSWER_COUNT];
    for c1 in colors.targets() {
        for o1 in objects.targets() {
            let Some(slot) = answers.iter().position(|(c, o)| c == c1 && o == o1) else { continue };
            for c2 in colors.in_story(c1) {
                if !has(c2, o1) {
                    continue;
                }
                for o2 in objects.in_story(o1) {
                    if !has(c1, o2) || !has(c2, o2) {
                        continue;
                    }
                    for c3 in colors.off_story(c1, &[c2]) {
                        for o3 in objects.off_story(o1, &[o2]) {
                            if has(c3, o3) {
                                post[slot] += 1.0;
                            }
                        }
                    }
                }
            }
        }
    }
    normalize(post)
}

fn normalize(mut post: [f64; ANSWER_COUNT]) -> [f64; ANSWER_COUNT] {
    let total: f64 = post.iter().sum();
    if total > 0.0 {
        post.iter_mut().for_each(|p| *p /= total);
    }
    post
}

/// Expected accuracy of the Bayes decision (the largest posterior).
pub fn bayes_accuracy(post: &[f64; ANSWER_COUNT]) -> f64 {
    post.iter().cloned().fold(0.0, f64::max)
}

/// The Bayes decision itself, lowest index on ties.
pub fn bayes_choice(post: &[f64; ANSWER_COUNT]) -> usize {
    crate::tensor::argmax(post)
}

/// Which modalities an oracle may look at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observer {
    FrameOnly,
    CaptionOnly,
    Both,
}

impl Observer {
    fn sees_frames(self) -> bool {
        self != Observer::CaptionOnly
    }

    fn sees_captions(self) -> bool {
        self != Observer::FrameOnly
    }
}

/// A generated item together with the facts it was generated from.
#[derive(Clone, Debug)]
pub struct GeneratedItem {
    pub instance: StoryInstance,
    pub facts: StoryFacts,
    pub family: Family,
    pub target: usize,
}

impl GeneratedItem {
    /// Posterior over the answers for `observer`, from the generator's own
    /// process.
    pub fn posterior(&self, world: &World, observer: Observer) -> [f64; ANSWER_COUNT] {
        let s = &world.spec;
        let f = &self.facts;
        let t = self.target;
        let story_objects: Vec<String> = f.objects.iter().map(|&i| s.objects[i].clone()).collect();
        let story_colors: Vec<String> = f.colors.iter().map(|&i| s.colors[i].clone()).collect();
        let object_k = if observer.sees_captions() {
            Knowledge::Known {
                target: &s.objects[f.objects[t]],
                story: &story_objects,
                inventory: &s.objects,
            }
        } else {
            Knowledge::Hidden { inventory: &s.objects }
        };
        let color_k = if observer.sees_frames() {
            Knowledge::Known {
                target: &s.colors[f.colors[t]],
                story: &story_colors,
                inventory: &s.colors,
            }
        } else {
            Knowledge::Hidden { inventory: &s.colors }
        };
        let answers = &self.instance.answers;
        let colors: Vec<String> = answers.iter().map(|a| find_value(a, &s.colors)).collect();
        let objects: Vec<String> = answers.iter().map(|a| find_value(a, &s.objects)).collect();
        match self.family {
            Family::CaptionAnswerable => single_posterior(object_k, &objects),
            Family::FrameAnswerable => single_posterior(color_k, &colors),
            Family::CrossModal => {
                let pairs: Vec<(String, String)> = colors.into_iter().zip(objects).collect();
                pair_posterior(color_k, object_k, &pairs)
            }
        }
    }
}

/// The first token of `answer` that names an inventory entry, or an empty
/// string when there is none.
fn find_value(answer: &[String], inventory: &[String]) -> String {
    answer
        .iter()
        .find(|t| inventory.contains(t))
        .cloned()
        .unwrap_or_default()
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    all.truncate(k);
    all
}

fn pick_family(rng: &mut ChaCha8Rng, mix: &[f64; 3]) -> Family {
    let total: f64 = mix.iter().sum();
    let r = rng.random::<f64>() * total;
    if r < mix[0] {
        Family::CaptionAnswerable
    } else if r < mix[0] + mix[1] {
        Family::FrameAnswerable
    } else {
        Family::CrossModal
    }
}

fn tokens(text: &str) -> Vec<String> {
    super::tokenize(text)
}

// Answers are short sentences rather than bare words so that every
// convolution width of the sentence encoder sees a full window.
fn object_answer(object: &str) -> String {
    format!("it was the {object} .")
}

fn color_answer(color: &str) -> String {
    format!("it was {color} .")
}

fn pair_answer(color: &str, object: &str) -> String {
    format!("it was {color} and the {object} .")
}

/// Generates one item. The random stream is consumed in a fixed order so a
/// seed fully determines the result.
pub fn generate_item(world: &World, rng: &mut ChaCha8Rng, qa_id: String) -> GeneratedItem {
    let s = &world.spec;
    let len = rng.random_range(s.min_story..=s.max_story);
    let facts = StoryFacts {
        characters: sample_distinct(rng, s.characters.len(), len),
        objects: sample_distinct(rng, s.objects.len(), len),
        colors: sample_distinct(rng, s.colors.len(), len),
        locations: sample_distinct(rng, s.locations.len(), len),
    };
    let noise = Normal::new(0.0, s.noise.max(0.0)).expect("finite noise");
    let mut captions = Vec::with_capacity(len);
    let mut frames = Vec::with_capacity(len);
    for i in 0..len {
        let template = CAPTION_TEMPLATES.choose(rng).expect("templates");
        let text = template
            .replace("{c}", &s.characters[facts.characters[i]])
            .replace("{o}", &s.objects[facts.objects[i]]);
        captions.push(tokens(&text));
        let loc = &world.location_prototypes[facts.locations[i]];
        let col = &world.color_prototypes[facts.colors[i]];
        frames.push(
            loc.iter()
                .zip(col)
                .map(|(a, b)| a + b + if s.noise > 0.0 { noise.sample(rng) } else { 0.0 })
                .collect(),
        );
    }

    let family = pick_family(rng, &s.family_mix);
    let t = rng.random_range(0..len);
    let character = &s.characters[facts.characters[t]];
    let location = &s.locations[facts.locations[t]];
    // In-story distractors can only be ruled out at the target position.
    // Off-story ones only need the value's absence, which gives a learner a
    // foothold before it can locate the target.
    let in_story = |rng: &mut ChaCha8Rng, story: &[usize], k: usize| -> Vec<usize> {
        let mut rest: Vec<usize> = story.iter().copied().filter(|&v| v != story[t]).collect();
        rest.shuffle(rng);
        rest.truncate(k);
        rest
    };
    let off_story = |rng: &mut ChaCha8Rng, story: &[usize], inventory: usize, k: usize| -> Vec<usize> {
        let mut rest: Vec<usize> = (0..inventory).filter(|v| !story.contains(v)).collect();
        rest.shuffle(rng);
        rest.truncate(k);
        rest
    };
    let (question, mut answers): (String, Vec<(String, bool)>) = match family {
        Family::CaptionAnswerable => {
            let mut a = vec![(object_answer(&s.objects[facts.objects[t]]), true)];
            let mut d = in_story(rng, &facts.objects, IN_STORY);
            d.extend(off_story(rng, &facts.objects, s.objects.len(), OFF_STORY));
            for o in d {
                a.push((object_answer(&s.objects[o]), false));
            }
            (format!("what did {character} talk about ?"), a)
        }
        Family::FrameAnswerable => {
            let mut a = vec![(color_answer(&s.colors[facts.colors[t]]), true)];
            let mut d = in_story(rng, &facts.colors, IN_STORY);
            d.extend(off_story(rng, &facts.colors, s.colors.len(), OFF_STORY));
            for c in d {
                a.push((color_answer(&s.colors[c]), false));
            }
            (format!("what color was the {location} ?"), a)
        }
        Family::CrossModal => {
            let cs = [in_story(rng, &facts.colors, 1)[0], off_story(rng, &facts.colors, s.colors.len(), 1)[0]];
            let os = [in_story(rng, &facts.objects, 1)[0], off_story(rng, &facts.objects, s.objects.len(), 1)[0]];
            let (c1, o1) = (facts.colors[t], facts.objects[t]);
            let pair = |c: usize, o: usize| pair_answer(&s.colors[c], &s.objects[o]);
            let a = vec![
                (pair(c1, o1), true),
                (pair(cs[0], o1), false),
                (pair(c1, os[0]), false),
                (pair(cs[0], os[0]), false),
                (pair(cs[1], os[1]), false),
            ];
            (format!("what color was the {location} and what did {character} talk about ?"), a)
        }
    };
    answers.shuffle(rng);
    let correct = answers.iter().position(|(_, c)| *c).expect("one correct answer");
    let (evidence_caption, evidence_frame) = match family {
        Family::CaptionAnswerable => (Some(t), None),
        Family::FrameAnswerable => (None, Some(t)),
        Family::CrossModal => (Some(t), Some(t)),
    };
    let mut item = GeneratedItem {
        instance: StoryInstance {
            qa_id,
            frames,
            captions,
            question: tokens(&question),
            answers: answers.into_iter().map(|(a, _)| tokens(&a)).collect(),
            correct,
            meta: None,
        },
        facts,
        family,
        target: t,
    };
    let frame_only = bayes_accuracy(&item.posterior(world, Observer::FrameOnly));
    let caption_only = bayes_accuracy(&item.posterior(world, Observer::CaptionOnly));
    item.instance.meta = Some(ItemMeta {
        family,
        evidence_caption,
        evidence_frame,
        ceiling_frame_only: frame_only,
        ceiling_caption_only: caption_only,
    });
    item
}

/// Split sizes for [`generate_synthetic`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 5000,
            val: 1000,
            test: 1000,
        }
    }
}

/// Mean per-item Bayes accuracy of each unimodal observer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ceilings {
    pub frame_only: f64,
    pub caption_only: f64,
}

impl Ceilings {
    pub fn of(items: &[StoryInstance]) -> Ceilings {
        let metas: Vec<&ItemMeta> = items.iter().filter_map(|i| i.meta.as_ref()).collect();
        let n = metas.len().max(1) as f64;
        Ceilings {
            frame_only: metas.iter().map(|m| m.ceiling_frame_only).sum::<f64>() / n,
            caption_only: metas.iter().map(|m| m.ceiling_caption_only).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCeilings {
    pub train: Ceilings,
    pub val: Ceilings,
    pub test: Ceilings,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub world: World,
    pub train: Vec<StoryInstance>,
    pub val: Vec<StoryInstance>,
    pub test: Vec<StoryInstance>,
    pub ceilings: SplitCeilings,
}

/// Generates `count` items with ids `{prefix}-{index}` from one seed.
pub fn generate_split(world: &World, count: usize, seed: u64, prefix: &str) -> Vec<GeneratedItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| generate_item(world, &mut rng, format!("{prefix}-{i:05}")))
        .collect()
}

/// Builds a world and its train/val/test splits from one seed.
pub fn generate_synthetic(spec: SyntheticWorldSpec, sizes: SplitSizes, seed: u64) -> Result<SyntheticData> {
    let world = World::new(spec, seed)?;
    let split = |n: usize, k: u64, name: &str| -> Vec<StoryInstance> {
        generate_split(&world, n, seed.wrapping_mul(31).wrapping_add(k), name)
            .into_iter()
            .map(|g| g.instance)
            .collect()
    };
    let train = split(sizes.train, 1, "train");
    let val = split(sizes.val, 2, "val");
    let test = split(sizes.test, 3, "test");
    let ceilings = SplitCeilings {
        train: Ceilings::of(&train),
        val: Ceilings::of(&val),
        test: Ceilings::of(&test),
    };
    Ok(SyntheticData {
        world,
        train,
        val,
        test,
        ceilings,
    })
}
