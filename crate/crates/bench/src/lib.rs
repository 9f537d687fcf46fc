//! Benchmark inputs: a spec, a prepared story and fresh parameters.

use mdam::data::synthetic::SyntheticWorldSpec;
use mdam::fixtures::desk_instance;
use mdam::model::xavier_init;
use mdam::text::prepare_story;
use mdam::{ModelParams, PreparedStory, Result, Variant, VariantSpec, Vocabulary};

pub struct Case {
    pub name: &'static str,
    pub spec: VariantSpec,
    pub story: PreparedStory,
    pub params: ModelParams,
}

/// Desk widths and the synthetic-task widths, each with a full-length story.
pub fn cases(variant: Variant) -> Result<Vec<Case>> {
    let specs = [
        ("desk", VariantSpec::desk()),
        ("synthetic", VariantSpec::synthetic(&SyntheticWorldSpec::default())),
    ];
    specs
        .into_iter()
        .map(|(name, spec)| {
            let spec = spec.with_variant(variant);
            let inst = desk_instance(spec.d_v, spec.story_len, 1);
            let vocab = Vocabulary::from_instances([&inst]);
            let story = prepare_story(&inst, &vocab, &spec)?;
            let params = xavier_init(&spec, &vocab, 1, None)?;
            Ok(Case { name, spec, story, params })
        })
        .collect()
}
