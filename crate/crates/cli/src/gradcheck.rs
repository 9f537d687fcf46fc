use anyhow::{anyhow, Result};
use clap::Args;
use mdam::fixtures::model_gradcheck;
use mdam::gradcheck::{GradCheckOptions, MIN_SAMPLES_PER_TENSOR};
use mdam::{OpKind, Variant, VariantSpec};

use crate::Status;

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Wider step for extrapolated estimates on smooth segments; 0 disables.
    #[arg(long, default_value_t = 1e-3)]
    pub wide_eps: f64,
    #[arg(long, default_value_t = MIN_SAMPLES_PER_TENSOR)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest relative error that still passes.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Variants to check (all by default).
    #[arg(long, value_delimiter = ',')]
    pub variant: Vec<Variant>,
    /// Scale one backward rule, as `OP` or `OP:FACTOR`, to show the check
    /// catches it.
    #[arg(long, hide = true, value_name = "OP[:FACTOR]")]
    pub inject_fault: Option<String>,
}

fn parse_fault(text: &str) -> Result<(OpKind, f64)> {
    let (name, factor) = match text.split_once(':') {
        Some((n, f)) => (n, f.parse::<f64>().map_err(|e| anyhow!("bad fault factor {f:?}: {e}"))?),
        None => (text, 1.5),
    };
    let kind = OpKind::from_name(name).ok_or_else(|| anyhow!("unknown op {name:?}"))?;
    Ok((kind, factor))
}

/// Checks each variant at desk widths and prints one line per variant plus
/// a verdict. Returns [`Status::CheckFailed`] when any error reaches the
/// tolerance.
pub fn gradcheck(args: &GradcheckArgs) -> Result<Status> {
    let opts = GradCheckOptions {
        eps: args.eps,
        wide_eps: (args.wide_eps > 0.0).then_some(args.wide_eps),
        samples_per_tensor: args.samples.max(MIN_SAMPLES_PER_TENSOR),
        seed: args.seed,
        fault: args.inject_fault.as_deref().map(parse_fault).transpose()?,
    };
    let variants = if args.variant.is_empty() { Variant::ALL.to_vec() } else { args.variant.clone() };
    let mut worst: Option<(Variant, f64, String)> = None;
    for variant in variants {
        let spec = VariantSpec::desk().with_variant(variant);
        let report = model_gradcheck(&spec, &opts)?;
        let at = report
            .worst
            .as_ref()
            .map_or("-".to_string(), |m| format!("{}[{}]", m.path, m.index));
        println!(
            "{variant}\tmax_rel_error\t{:.3e}\tworst\t{at}\tcoordinates\t{}",
            report.max_rel_error, report.coordinates
        );
        if worst.as_ref().is_none_or(|w| report.max_rel_error > w.1) {
            worst = Some((variant, report.max_rel_error, at));
        }
    }
    let (variant, err, at) = worst.ok_or_else(|| anyhow!("no variants to check"))?;
    let pass = err < args.tolerance;
    println!(
        "{}\tworst\t{variant}\t{at}\t{err:.3e}\ttolerance\t{:.0e}",
        if pass { "PASS" } else { "FAIL" },
        args.tolerance
    );
    Ok(if pass { Status::Success } else { Status::CheckFailed })
}
