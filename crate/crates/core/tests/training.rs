//! Schedule, determinism, resumption and evaluation behaviour of training.

use mdam::checkpoint::Checkpoint;
use mdam::config::{DropoutRates, Variant, VariantSpec};
use mdam::data::synthetic::{generate_synthetic, SplitSizes, SyntheticWorldSpec};
use mdam::model::{forward, xavier_init};
use mdam::text::{prepare_all, Vocabulary};
use mdam::train::{
    evaluate, evaluate_parallel, loss_for, train, EpochRecord, LossKind, TrainOptions, TrainState, METRICS_COLUMNS,
};
use mdam::{Graph, MdamError, PreparedStory};

struct Fixture {
    spec: VariantSpec,
    vocab: Vocabulary,
    train: Vec<PreparedStory>,
    val: Vec<PreparedStory>,
}

fn tiny_spec() -> VariantSpec {
    VariantSpec {
        story_len: 8,
        sentence_len: 12,
        d_model: 16,
        d_v: 16,
        d_word: 8,
        heads: 2,
        d_proj: 4,
        attn_layers: 1,
        fusion_depth: 1,
        windows: vec![1, 2],
        batch_size: 8,
        epochs: 6,
        phase1_lr: 1e-3,
        phase2_lr: 1e-5,
        phase1_patience: 2,
        seed: 4,
        ..VariantSpec::default()
    }
}

fn fixture(spec: VariantSpec, train_n: usize, val_n: usize) -> Fixture {
    let world = SyntheticWorldSpec {
        d_v: spec.d_v,
        ..SyntheticWorldSpec::default()
    };
    let data = generate_synthetic(
        world,
        SplitSizes {
            train: train_n,
            val: val_n,
            test: 1,
        },
        3,
    )
    .unwrap();
    let vocab = Vocabulary::from_instances(data.train.iter().chain(&data.val));
    Fixture {
        train: prepare_all(&data.train, &vocab, &spec).unwrap(),
        val: prepare_all(&data.val, &vocab, &spec).unwrap(),
        vocab,
        spec,
    }
}

fn fresh(f: &Fixture) -> TrainState {
    TrainState::new(xavier_init(&f.spec, &f.vocab, f.spec.seed, None).unwrap(), &f.spec)
}

fn checkpoint_bytes(f: &Fixture, state: &TrainState) -> Vec<u8> {
    Checkpoint::new(f.spec.clone(), f.vocab.clone(), state.clone()).to_bytes().unwrap()
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let f = fixture(tiny_spec(), 40, 20);
    let a = train(&f.spec, fresh(&f), &f.train, &f.val, TrainOptions::default()).unwrap();
    let b = train(&f.spec, fresh(&f), &f.train, &f.val, TrainOptions::default()).unwrap();
    assert_eq!(checkpoint_bytes(&f, &a.state), checkpoint_bytes(&f, &b.state));

    let other = VariantSpec { seed: 5, ..f.spec.clone() };
    let c = train(&other, fresh(&f), &f.train, &f.val, TrainOptions::default()).unwrap();
    assert_ne!(a.state.params, c.state.params);
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let f = fixture(tiny_spec(), 40, 20);
    let full = train(&f.spec, fresh(&f), &f.train, &f.val, TrainOptions::default()).unwrap();
    for stop in [1, 3, 4] {
        let first = train(
            &f.spec,
            fresh(&f),
            &f.train,
            &f.val,
            TrainOptions {
                stop_after: Some(stop),
                ..Default::default()
            },
        )
        .unwrap();
        let saved = checkpoint_bytes(&f, &first.state);
        let restored = Checkpoint::from_bytes(&saved).unwrap();
        let rest = train(&f.spec, restored.state, &f.train, &f.val, TrainOptions::default()).unwrap();
        assert_eq!(checkpoint_bytes(&f, &rest.state), checkpoint_bytes(&f, &full.state), "stopped after {stop}");
    }
}

#[test]
fn phase_two_starts_from_the_best_phase_one_point() {
    let spec = VariantSpec {
        epochs: 8,
        phase1_patience: 100,
        ..tiny_spec()
    };
    let f = fixture(spec, 40, 20);
    let mut best_in_phase1 = None;
    let mut log = Vec::new();
    let outcome = train(
        &f.spec,
        fresh(&f),
        &f.train,
        &f.val,
        TrainOptions {
            on_epoch: Some(Box::new(|state: &TrainState, rec: &EpochRecord| {
                if rec.phase == 1 {
                    best_in_phase1 = Some(state.progress.best_params.clone());
                }
                Ok(())
            })),
            log: Some(&mut log),
            ..Default::default()
        },
    )
    .unwrap();
    let start = outcome.phase2_start.clone().expect("phase 2 ran");
    assert_eq!(Some(start), best_in_phase1);

    let phases: Vec<(u8, LossKind, f64)> = outcome.records.iter().map(|r| (r.phase, r.loss, r.lr)).collect();
    let switch = phases.iter().position(|p| p.0 == 2).unwrap();
    assert_eq!(switch, 4);
    assert!(phases[..switch].iter().all(|&p| p == (1, LossKind::CrossEntropy, 1e-3)));
    assert!(phases[switch..].iter().all(|&p| p == (2, LossKind::CategoricalHinge, 1e-5)));

    let text = String::from_utf8(log).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# spec: {"));
    assert_eq!(lines.next().unwrap(), "# seed: 4");
    assert_eq!(lines.next().unwrap(), METRICS_COLUMNS);
    let parsed: Vec<EpochRecord> = lines.map(|l| EpochRecord::parse(l).unwrap()).collect();
    assert_eq!(parsed.len(), 8);
    assert!(!text.lines().skip(1).any(|l| l.contains(',')));
}

#[test]
fn disabling_phase_two_gives_a_pure_cross_entropy_run() {
    let spec = VariantSpec {
        phase2: false,
        phase1_patience: 100,
        epochs: 3,
        ..tiny_spec()
    };
    let f = fixture(spec, 24, 10);
    let out = train(&f.spec, fresh(&f), &f.train, &f.val, TrainOptions::default()).unwrap();
    assert_eq!(out.records.len(), 3);
    assert!(out.records.iter().all(|r| r.loss == LossKind::CrossEntropy));
    assert!(out.phase2_start.is_none());
}

#[test]
fn batch_gradient_is_the_mean_of_item_gradients() {
    let spec = VariantSpec {
        dropout: DropoutRates::none(),
        ..tiny_spec()
    };
    let f = fixture(spec, 6, 1);
    let params = xavier_init(&f.spec, &f.vocab, 1, None).unwrap();
    for kind in [LossKind::CrossEntropy, LossKind::CategoricalHinge] {
        // one graph holding the whole batch
        let mut joint = params.clone();
        let mut g = Graph::new();
        let mut total = None;
        let mut separate_loss = 0.0;
        for s in &f.train {
            let out = forward(&mut g, &joint, &f.spec, s, None).unwrap();
            let l = loss_for(&mut g, kind, &out, s.correct).unwrap();
            separate_loss += g.value(l).item();
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l).unwrap(),
            });
        }
        let mean = g.scale(total.unwrap(), 1.0 / f.train.len() as f64).unwrap();
        assert!((g.value(mean).item() - separate_loss / f.train.len() as f64).abs() < 1e-12);
        g.backward(mean).unwrap();
        joint.accumulate(&g).unwrap();

        // one graph per item, accumulated then averaged as the trainer does
        let mut items = params.clone();
        for s in &f.train {
            let mut g = Graph::new();
            let out = forward(&mut g, &items, &f.spec, s, None).unwrap();
            let l = loss_for(&mut g, kind, &out, s.correct).unwrap();
            g.backward(l).unwrap();
            items.accumulate(&g).unwrap();
        }
        items.scale_grads(1.0 / f.train.len() as f64);

        for ((path, a), (_, b)) in joint.iter().zip(items.iter()) {
            for (x, y) in a.grad.data().iter().zip(b.grad.data()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{kind:?} {path}");
            }
        }
    }
}

#[test]
fn evaluation_is_deterministic_and_thread_count_independent() {
    let f = fixture(tiny_spec(), 1, 60);
    let params = xavier_init(&f.spec, &f.vocab, 2, None).unwrap();
    let a = evaluate(&params, &f.spec, &f.val).unwrap();
    let b = evaluate(&params, &f.spec, &f.val).unwrap();
    let c = evaluate_parallel(&params, &f.spec, &f.val, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    let one = evaluate(&params, &f.spec, &f.val[..1]).unwrap();
    assert!(one.accuracy == 0.0 || one.accuracy == 1.0);
}

#[test]
fn empty_sets_are_rejected() {
    let f = fixture(tiny_spec(), 4, 4);
    let err = train(&f.spec, fresh(&f), &[], &f.val, TrainOptions::default()).unwrap_err();
    assert!(matches!(err, MdamError::EmptySequence(_)));
    let err = train(&f.spec, fresh(&f), &f.train, &[], TrainOptions::default()).unwrap_err();
    assert!(matches!(err, MdamError::EmptySequence(_)));
}

#[test]
fn every_variant_trains_one_epoch() {
    for variant in Variant::ALL {
        let spec = VariantSpec {
            variant,
            epochs: 1,
            ..tiny_spec()
        };
        let f = fixture(spec, 16, 8);
        let out = train(&f.spec, fresh(&f), &f.train, &f.val, TrainOptions::default()).unwrap();
        assert!(out.records[0].train_loss.is_finite(), "{variant}");
    }
}
