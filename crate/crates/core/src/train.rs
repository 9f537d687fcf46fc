//! Losses, Adam, the two-phase training schedule and evaluation.
//!
//! Phase 1 minimizes cross-entropy at `phase1_lr` until validation accuracy
//! stops improving for `phase1_patience` epochs or half the epoch budget is
//! spent. Phase 2 reloads the best phase-1 weights, starts a fresh optimizer
//! and minimizes the categorical hinge on the logits at `phase2_lr` for the
//! rest of the budget. The returned parameters are the best validation point
//! over both phases (earliest epoch on ties).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::predict;
use crate::autodiff::{Graph, Var};
use crate::config::VariantSpec;
use crate::data::ANSWER_COUNT;
use crate::error::{MdamError, Result};
use crate::model::{forward, ForwardOutput};
use crate::params::ModelParams;
use crate::tensor::Tensor;
use crate::text::PreparedStory;

/// Lower clamp on the probability inside the cross-entropy logarithm.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    CategoricalHinge,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::CategoricalHinge => "categorical_hinge",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `−ln(max(z[y], 1e-12))` on a probability vector.
pub fn cross_entropy_loss(g: &mut Graph, probs: Var, y: usize) -> Result<Var> {
    g.neg_log_pick(probs, y, CE_CLAMP)
}

/// `max(0, 1 + max_{i≠y} s_i − s_y)` on raw logits.
pub fn categorical_hinge_loss(g: &mut Graph, logits: Var, y: usize) -> Result<Var> {
    g.categorical_hinge(logits, y)
}

pub fn loss_for(g: &mut Graph, kind: LossKind, out: &ForwardOutput, y: usize) -> Result<Var> {
    match kind {
        LossKind::CrossEntropy => cross_entropy_loss(g, out.probs, y),
        LossKind::CategoricalHinge => categorical_hinge_loss(g, out.logits, y),
    }
}

/// Adam with bias correction. Moments are created lazily per trainable
/// parameter; frozen parameters are never touched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: BTreeMap<String, Tensor>,
    #[serde(skip)]
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (path, p) in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let shape = p.grad.shape().to_vec();
            let m = self.m.entry(path.to_string()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(path.to_string()).or_insert_with(|| Tensor::zeros(&shape));
            if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                return Err(MdamError::dim("adam moments", m.shape(), &shape));
            }
            let grad = p.grad.data().to_vec();
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let value = p.value_mut().data_mut();
            for (((x, g), mi), vi) in value.iter_mut().zip(&grad).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Everything needed to continue training after an interruption.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainProgress {
    pub adam: Adam,
    pub phase: u8,
    /// Next epoch to run (0-based).
    pub next_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub best_params: ModelParams,
    pub epochs_since_improvement: usize,
    /// Set when the schedule ended before the epoch budget.
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub progress: TrainProgress,
}

impl TrainState {
    pub fn new(params: ModelParams, spec: &VariantSpec) -> Self {
        TrainState {
            progress: TrainProgress {
                adam: Adam::new(spec.phase1_lr),
                phase: 1,
                next_epoch: 0,
                best_val_accuracy: f64::NEG_INFINITY,
                best_epoch: None,
                best_params: params.clone(),
                epochs_since_improvement: 0,
                done: false,
            },
            params,
        }
    }

    pub fn finished(&self, spec: &VariantSpec) -> bool {
        self.progress.next_epoch >= spec.epochs || self.progress.done
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub loss: LossKind,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

pub const METRICS_COLUMNS: &str = "epoch\tphase\tloss\tlr\ttrain_loss\ttrain_accuracy\tval_accuracy\twall_seconds";

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch,
            self.phase,
            self.loss,
            self.lr,
            self.train_loss,
            self.train_accuracy,
            self.val_accuracy,
            self.wall_seconds
        )
    }

    pub fn parse(line: &str) -> Result<EpochRecord> {
        let bad = || MdamError::Format(format!("malformed metrics line {line:?}"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            phase: f[1].parse().map_err(|_| bad())?,
            loss: match f[2] {
                "cross_entropy" => LossKind::CrossEntropy,
                "categorical_hinge" => LossKind::CategoricalHinge,
                _ => return Err(bad()),
            },
            lr: num(f[3])?,
            train_loss: num(f[4])?,
            train_accuracy: num(f[5])?,
            val_accuracy: num(f[6])?,
            wall_seconds: num(f[7])?,
        })
    }
}

/// Header lines of a metrics log: the full spec and the seed.
pub fn metrics_header(spec: &VariantSpec) -> Result<String> {
    Ok(format!(
        "# spec: {}\n# seed: {}\n{METRICS_COLUMNS}\n",
        serde_json::to_string(spec)?,
        spec.seed
    ))
}

/// Called after every epoch with the state and the new log line.
pub type EpochHook<'a> = dyn FnMut(&TrainState, &EpochRecord) -> Result<()> + 'a;

/// Hooks and limits for [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Stop once this many epochs have run in total (for interruption tests).
    pub stop_after: Option<usize>,
    pub on_epoch: Option<Box<EpochHook<'a>>>,
    /// Metrics log sink; the header is written when training starts at
    /// epoch 0.
    pub log: Option<&'a mut dyn Write>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<EpochRecord>,
    /// Parameters phase 2 started from, if it ran in this call.
    pub phase2_start: Option<ModelParams>,
}

impl TrainOutcome {
    /// The best validation point.
    pub fn best_params(&self) -> &ModelParams {
        &self.state.progress.best_params
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn phase1_limit(spec: &VariantSpec) -> usize {
    if spec.phase2 {
        (spec.epochs / 2).max(1)
    } else {
        spec.epochs
    }
}

struct EpochStats {
    loss: f64,
    accuracy: f64,
}

fn run_epoch(
    state: &mut TrainState,
    spec: &VariantSpec,
    train_set: &[PreparedStory],
    epoch: usize,
    kind: LossKind,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(spec.seed, epoch as u64, 0)));
    let mut total_loss = 0.0;
    let mut hits = 0usize;
    state.params.zero_grads();
    for (step, batch) in order.chunks(spec.batch_size).enumerate() {
        for (k, &idx) in batch.iter().enumerate() {
            let story = &train_set[idx];
            let position = (step * spec.batch_size + k) as u64;
            let mut g = Graph::training(mix(spec.seed, epoch as u64, position + 1));
            let out = forward(&mut g, &state.params, spec, story, None)?;
            let loss = loss_for(&mut g, kind, &out, story.correct)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(MdamError::NonFiniteLoss {
                    epoch,
                    step,
                    diagnostics: format!(
                        "item {} loss {value} logits {:?} grad norm {}",
                        story.qa_id,
                        g.value(out.logits).data(),
                        state.params.grad_norm()
                    ),
                });
            }
            total_loss += value;
            if predict(g.value(out.logits).data()) == story.correct {
                hits += 1;
            }
            g.backward(loss)?;
            state.params.accumulate(&g)?;
        }
        state.params.scale_grads(1.0 / batch.len() as f64);
        if let Some(max) = spec.clip_norm {
            let norm = state.params.grad_norm();
            if !norm.is_finite() {
                return Err(MdamError::NonFiniteLoss {
                    epoch,
                    step,
                    diagnostics: format!("gradient norm {norm}"),
                });
            }
            if norm > max {
                state.params.scale_grads(max / norm);
            }
        }
        state.progress.adam.step(&mut state.params)?;
        state.params.zero_grads();
    }
    let n = train_set.len() as f64;
    Ok(EpochStats {
        loss: total_loss / n,
        accuracy: hits as f64 / n,
    })
}

/// Runs (or resumes) the two-phase schedule.
pub fn train(
    spec: &VariantSpec,
    state: TrainState,
    train_set: &[PreparedStory],
    val_set: &[PreparedStory],
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    spec.validate()?;
    if train_set.is_empty() {
        return Err(MdamError::EmptySequence("empty training set".into()));
    }
    if val_set.is_empty() {
        return Err(MdamError::EmptySequence("empty validation set".into()));
    }
    let mut state = state;
    if state.progress.next_epoch == 0 {
        if let Some(log) = options.log.as_deref_mut() {
            log.write_all(metrics_header(spec)?.as_bytes()).map_err(|e| MdamError::io("metrics log", e))?;
        }
    }
    let mut records = Vec::new();
    let mut phase2_start = None;
    while !state.finished(spec) {
        if options.stop_after.is_some_and(|s| state.progress.next_epoch >= s) {
            break;
        }
        let epoch = state.progress.next_epoch;
        let started = Instant::now();
        let kind = if state.progress.phase == 1 {
            LossKind::CrossEntropy
        } else {
            LossKind::CategoricalHinge
        };
        let lr = state.progress.adam.lr;
        let stats = run_epoch(&mut state, spec, train_set, epoch, kind)?;
        let val_accuracy = evaluate(&state.params, spec, val_set)?.accuracy;

        let p = &mut state.progress;
        if val_accuracy > p.best_val_accuracy {
            p.best_val_accuracy = val_accuracy;
            p.best_epoch = Some(epoch);
            p.best_params = state.params.clone();
            p.epochs_since_improvement = 0;
        } else {
            p.epochs_since_improvement += 1;
        }
        p.next_epoch = epoch + 1;
        let record = EpochRecord {
            epoch,
            phase: p.phase,
            loss: kind,
            lr,
            train_loss: stats.loss,
            train_accuracy: stats.accuracy,
            val_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        };

        if p.phase == 1 {
            let stalled = p.epochs_since_improvement >= spec.phase1_patience;
            let budget_spent = p.next_epoch >= phase1_limit(spec);
            if stalled || budget_spent {
                if spec.phase2 && p.next_epoch < spec.epochs {
                    p.phase = 2;
                    p.adam = Adam::new(spec.phase2_lr);
                    p.epochs_since_improvement = 0;
                    state.params = p.best_params.clone();
                    phase2_start = Some(state.params.clone());
                } else {
                    p.done = true;
                }
            }
        }

        if let Some(log) = options.log.as_deref_mut() {
            writeln!(log, "{}", record.to_line()).map_err(|e| MdamError::io("metrics log", e))?;
            log.flush().map_err(|e| MdamError::io("metrics log", e))?;
        }
        if let Some(hook) = options.on_epoch.as_mut() {
            hook(&state, &record)?;
        }
        records.push(record);
    }
    Ok(TrainOutcome {
        state,
        records,
        phase2_start,
    })
}

/// Output of the model on one item.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub qa_id: String,
    pub predicted: usize,
    pub correct: usize,
    pub probs: [f64; ANSWER_COUNT],
    pub logits: [f64; ANSWER_COUNT],
}

impl Prediction {
    /// `qa_id <TAB> predicted <TAB> p1,p2,p3,p4,p5`
    pub fn to_line(&self) -> String {
        let probs: Vec<String> = self.probs.iter().map(|p| p.to_string()).collect();
        format!("{}\t{}\t{}", self.qa_id, self.predicted, probs.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    fn from_predictions(predictions: Vec<Prediction>) -> Self {
        let hits = predictions.iter().filter(|p| p.predicted == p.correct).count();
        Evaluation {
            accuracy: hits as f64 / predictions.len().max(1) as f64,
            predictions,
        }
    }
}

fn to_array(t: &Tensor) -> [f64; ANSWER_COUNT] {
    let mut a = [0.0; ANSWER_COUNT];
    a.copy_from_slice(t.data());
    a
}

pub fn predict_one(params: &ModelParams, spec: &VariantSpec, story: &PreparedStory) -> Result<Prediction> {
    let mut g = Graph::new();
    let out = forward(&mut g, params, spec, story, None)?;
    let logits = to_array(g.value(out.logits));
    Ok(Prediction {
        qa_id: story.qa_id.clone(),
        predicted: predict(&logits),
        correct: story.correct,
        probs: to_array(g.value(out.probs)),
        logits,
    })
}

/// Accuracy and per-item predictions with dropout disabled.
pub fn evaluate(params: &ModelParams, spec: &VariantSpec, items: &[PreparedStory]) -> Result<Evaluation> {
    let predictions = items
        .iter()
        .map(|s| predict_one(params, spec, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_predictions(predictions))
}

/// [`evaluate`] sharded over `threads` scoped threads.
pub fn evaluate_parallel(params: &ModelParams, spec: &VariantSpec, items: &[PreparedStory], threads: usize) -> Result<Evaluation> {
    let threads = threads.max(1);
    if threads == 1 || items.len() < 2 * threads {
        return evaluate(params, spec, items);
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Prediction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|x| predict_one(params, spec, x)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread")).collect()
    });
    let mut predictions = Vec::with_capacity(items.len());
    for p in parts {
        predictions.extend(p?);
    }
    Ok(Evaluation::from_predictions(predictions))
}

/// Mean of per-model probabilities; the prediction is its argmax.
pub fn ensemble_evaluate(models: &[(&ModelParams, &VariantSpec)], items: &[PreparedStory]) -> Result<Evaluation> {
    if models.is_empty() {
        return Err(MdamError::Argument("ensemble of no models".into()));
    }
    let mut predictions = Vec::with_capacity(items.len());
    for story in items {
        let mut probs = [0.0; ANSWER_COUNT];
        let mut logits = [0.0; ANSWER_COUNT];
        for (params, spec) in models {
            let p = predict_one(params, spec, story)?;
            for j in 0..ANSWER_COUNT {
                probs[j] += p.probs[j] / models.len() as f64;
                logits[j] += p.logits[j] / models.len() as f64;
            }
        }
        predictions.push(Prediction {
            qa_id: story.qa_id.clone(),
            predicted: predict(&probs),
            correct: story.correct,
            probs,
            logits,
        });
    }
    Ok(Evaluation::from_predictions(predictions))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.2; 5]).unwrap());
        let l = cross_entropy_loss(&mut g, z, 3).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
        let one = g.constant(Tensor::vector(vec![0.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let l = cross_entropy_loss(&mut g, one, 1).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(cross_entropy_loss(&mut g, one, 5).is_err());
    }

    #[test]
    fn hinge_closed_forms() {
        let mut g = Graph::new();
        let cases: [(&[f64], usize, f64); 3] = [
            (&[5.0, 0.0, 0.0, 0.0, 0.0], 0, 0.0),
            (&[0.7; 5], 2, 1.0),
            (&[0.0, 2.0, 0.0, 0.0, 0.0], 0, 3.0),
        ];
        for (logits, y, want) in cases {
            let s = g.constant(Tensor::vector(logits.to_vec()).unwrap());
            let l = categorical_hinge_loss(&mut g, s, y).unwrap();
            assert_eq!(g.value(l).item(), want);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::vector(vec![0.5, 0.5]).unwrap(), false);
        p.entry_mut("w").unwrap().grad = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let mut adam = Adam::new(0.01);
        adam.step(&mut p).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (0.5 - 0.01)).abs() < 1e-9);
        assert_eq!(w[1], 0.5);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let mut p = ModelParams::new();
        p.insert("e", Tensor::vector(vec![1.0]).unwrap(), true);
        p.entry_mut("e").unwrap().grad = Tensor::vector(vec![3.0]).unwrap();
        Adam::new(0.1).step(&mut p).unwrap();
        assert_eq!(p.get("e").unwrap().data(), &[1.0]);
    }

    #[test]
    fn metrics_lines_round_trip() {
        let r = EpochRecord {
            epoch: 3,
            phase: 2,
            loss: LossKind::CategoricalHinge,
            lr: 0.0001,
            train_loss: 0.25,
            train_accuracy: 0.5,
            val_accuracy: 0.75,
            wall_seconds: 1.5,
        };
        assert_eq!(EpochRecord::parse(&r.to_line()).unwrap(), r);
        assert!(!r.to_line().contains(','));
    }
}
