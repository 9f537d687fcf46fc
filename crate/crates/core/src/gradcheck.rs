//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, OpKind, Var};
use crate::error::Result;
use crate::params::ModelParams;

/// Lower bound on coordinates sampled per parameter tensor.
pub const MIN_SAMPLES_PER_TENSOR: usize = 50;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Larger step used with Richardson extrapolation when the function is
    /// smooth on `[x − h, x + h]`, which cuts the roundoff share of the
    /// numeric estimate by `h / eps`. Coordinates whose wide segment crosses
    /// a ReLU, max or clamp switch fall back to `eps`.
    pub wide_eps: Option<f64>,
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Corrupts one backward rule; only used to prove the checker notices.
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            wide_eps: Some(1e-3),
            samples_per_tensor: MIN_SAMPLES_PER_TENSOR,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    /// Largest relative error seen in each checked tensor.
    pub per_param: Vec<(String, f64)>,
    pub coordinates: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of the scalar built by `f` with central
/// differences at sampled coordinates of every trainable parameter. `f` must
/// be deterministic: it is evaluated on fresh evaluation graphs.
pub fn finite_diff_check<F>(f: F, params: &mut ModelParams, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ModelParams) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some((kind, factor)) = opts.fault {
        g.inject_fault(kind, factor);
    }
    let loss = f(&mut g, params)?;
    g.backward(loss)?;
    let analytic: std::collections::HashMap<String, Vec<f64>> = g
        .param_vars()
        .iter()
        .filter_map(|(path, v)| g.grad(*v).map(|t| (path.clone(), t.into_data())))
        .collect();
    drop(g);

    let eval = |p: &ModelParams| -> Result<(f64, Vec<u64>)> {
        let mut g = Graph::new();
        let loss = f(&mut g, p)?;
        Ok((g.value(loss).item(), g.branch_pattern()))
    };
    let base_pattern = eval(params)?.1;
    let central = |params: &mut ModelParams, path: &str, idx: usize, h: f64| -> Result<(f64, bool)> {
        let original = params.get(path).unwrap().data()[idx];
        params.entry_mut(path)?.value_mut().data_mut()[idx] = original + h;
        let plus = eval(params);
        params.entry_mut(path)?.value_mut().data_mut()[idx] = original - h;
        let minus = eval(params);
        params.entry_mut(path)?.value_mut().data_mut()[idx] = original;
        let (plus, minus) = (plus?, minus?);
        let smooth = plus.1 == base_pattern && minus.1 == base_pattern;
        Ok(((plus.0 - minus.0) / (2.0 * h), smooth))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let trainable: Vec<(String, usize)> = params
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(k, p)| (k.to_string(), p.value().len()))
        .collect();

    let mut report = GradCheckReport::default();
    for (path, len) in trainable {
        let count = opts.samples_per_tensor.max(MIN_SAMPLES_PER_TENSOR).min(len);
        let mut coords = sample(&mut rng, len, count).into_vec();
        coords.sort_unstable();
        let mut worst_here: f64 = 0.0;
        for idx in coords {
            let mut numeric = None;
            if let Some(h) = opts.wide_eps {
                let (wide, smooth_wide) = central(params, &path, idx, h)?;
                let (half, smooth_half) = central(params, &path, idx, h / 2.0)?;
                if smooth_wide && smooth_half {
                    numeric = Some((4.0 * half - wide) / 3.0);
                }
            }
            let numeric = match numeric {
                Some(n) => n,
                None => central(params, &path, idx, opts.eps)?.0,
            };
            let a = analytic.get(&path).map_or(0.0, |g| g[idx]);
            let rel = relative_error(a, numeric);
            report.coordinates += 1;
            worst_here = worst_here.max(rel);
            if report.worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                report.worst = Some(Mismatch {
                    path: path.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
            report.max_rel_error = report.max_rel_error.max(rel);
        }
        report.per_param.push((path, worst_here));
    }
    Ok(report)
}
