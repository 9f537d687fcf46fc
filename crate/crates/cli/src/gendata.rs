use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use mdam::data::save_dataset;
use mdam::data::synthetic::{generate_synthetic, SplitSizes, SyntheticData, SyntheticWorldSpec};
use mdam::VariantSpec;

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON world description; missing fields take the defaults.
    #[arg(long, value_name = "FILE")]
    pub world: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub train: usize,
    #[arg(long, default_value_t = 1000)]
    pub val: usize,
    #[arg(long, default_value_t = 1000)]
    pub test: usize,
    /// Proportions of caption, frame and cross-modal questions, e.g. 25,25,50.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub mix: Option<Vec<f64>>,
    /// Frame feature width.
    #[arg(long)]
    pub d_v: Option<usize>,
    /// Frame noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
}

/// Writes `train/val/test.jsonl`, `ceilings.json`, `world.json` and a
/// `spec.json` with a model sized for the data.
pub fn gen_data(args: &GenDataArgs) -> Result<SyntheticData> {
    let mut world: SyntheticWorldSpec = match &args.world {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticWorldSpec::default(),
    };
    if let Some(m) = &args.mix {
        world.family_mix = [m[0], m[1], m[2]];
    }
    if let Some(d) = args.d_v {
        world.d_v = d;
    }
    if let Some(n) = args.noise {
        world.noise = n;
    }
    let sizes = SplitSizes {
        train: args.train,
        val: args.val,
        test: args.test,
    };
    let data = generate_synthetic(world, sizes, args.seed)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (name, items) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        save_dataset(args.out.join(format!("{name}.jsonl")), items)?;
    }
    crate::write_file(&args.out.join("ceilings.json"), &serde_json::to_string_pretty(&data.ceilings)?)?;
    crate::write_file(&args.out.join("world.json"), &serde_json::to_string(&data.world)?)?;
    let spec = VariantSpec::synthetic(&data.world.spec);
    crate::write_file(&args.out.join("spec.json"), &serde_json::to_string_pretty(&spec)?)?;
    let c = &data.ceilings.test;
    println!(
        "items\t{}/{}/{}\ttest_ceiling_frame_only\t{:.4}\ttest_ceiling_caption_only\t{:.4}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        c.frame_only,
        c.caption_only
    );
    Ok(data)
}
