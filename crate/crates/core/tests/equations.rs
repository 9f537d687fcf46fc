//! Closed-form and independently computed oracles for the fusion, answer
//! scoring and attention formulas.

use mdam::answer::{init_answer_params, score_answers, BIAS_PATH, WEIGHT_PATH};
use mdam::attention::dot_prod_attn;
use mdam::config::{Variant, VariantSpec};
use mdam::fusion::{block_path, deep_residual, fuse, init_fusion_params, Branch, FusionInputs, OUTPUT_PATH};
use mdam::gradcheck::{finite_diff_check, GradCheckOptions};
use mdam::layers::Initializer;
use mdam::{Graph, ModelParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Row vector times row-major square matrix.
fn vecmat(x: &[f64], m: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|j| (0..n).map(|i| x[i] * m[i * n + j]).sum()).collect()
}

fn matmat(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                out[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    out
}

fn identity(n: usize) -> Vec<f64> {
    (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
}

fn tanh_all(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(f64::tanh).collect()
}

/// `F(H, x) = tanh(H W_H) ⊙ tanh(tanh(x W_1) W_2)` with plain loops.
fn gate(p: &ModelParams, layer: usize, h: &[f64], x: &[f64]) -> Vec<f64> {
    let w = |name: &str| p.get(&block_path(Branch::Frame, layer, name)).unwrap().data().to_vec();
    let left = tanh_all(vecmat(h, &w("W_H")));
    let right = tanh_all(vecmat(&tanh_all(vecmat(x, &w("W_1"))), &w("W_2")));
    left.iter().zip(&right).map(|(a, b)| a * b).collect()
}

/// The closed summation form
/// `H = q ∏_{l} W_q⁽ˡ⁾ + Σ_l F⁽ˡ⁾(H⁽ˡ⁻¹⁾, x) ∏_{n>l} W_q⁽ⁿ⁾`.
fn summation_form(p: &ModelParams, depth: usize, q: &[f64], x: &[f64]) -> Vec<f64> {
    let n = q.len();
    let wq = |l: usize| p.get(&block_path(Branch::Frame, l, "W_q")).unwrap().data().to_vec();
    let tail = |from: usize| (from..depth).fold(identity(n), |acc, l| matmat(&acc, &wq(l), n));
    // intermediate H values are only needed as gate inputs
    let mut hs = vec![q.to_vec()];
    for l in 0..depth {
        let prev = &hs[l];
        let mut next = vecmat(prev, &wq(l));
        for (a, b) in next.iter_mut().zip(gate(p, l, prev, x)) {
            *a += b;
        }
        hs.push(next);
    }
    let mut out = vecmat(q, &tail(0));
    for l in 0..depth {
        let term = vecmat(&gate(p, l, &hs[l], x), &tail(l + 1));
        for (o, t) in out.iter_mut().zip(term) {
            *o += t;
        }
    }
    out
}

fn fusion_setup(width: usize, depth: usize, variant: Variant, seed: u64) -> (VariantSpec, ModelParams) {
    let spec = VariantSpec {
        variant,
        d_model: width,
        fusion_depth: depth,
        windows: vec![1, 2],
        ..VariantSpec::desk()
    };
    let mut p = ModelParams::new();
    init_fusion_params(&mut Initializer::new(&mut p, seed), &spec);
    (spec, p)
}

#[test]
fn residual_recursion_matches_summation_form_at_width_4() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for depth in 1..=3 {
        for trial in 0..20 {
            let (_, p) = fusion_setup(4, depth, Variant::Mdam, 100 + trial);
            let q = random_vec(&mut rng, 4);
            let x = random_vec(&mut rng, 4);
            let mut g = Graph::new();
            let qv = g.constant(Tensor::vector(q.clone()).unwrap());
            let xv = g.constant(Tensor::vector(x.clone()).unwrap());
            let h = deep_residual(&mut g, &p, Branch::Frame, depth, qv, xv).unwrap();
            let oracle = summation_form(&p, depth, &q, &x);
            for (a, b) in g.value(h).data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10, "depth {depth}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn zero_modality_vector_leaves_a_linear_map_of_q() {
    let (_, p) = fusion_setup(4, 2, Variant::Mdam, 5);
    let q = vec![0.3, -0.7, 1.1, 0.2];
    let run = |scale: f64| {
        let mut g = Graph::new();
        let qv = g.constant(Tensor::vector(q.iter().map(|v| v * scale).collect()).unwrap());
        let xv = g.constant(Tensor::zeros(&[4]));
        let h = deep_residual(&mut g, &p, Branch::Frame, 2, qv, xv).unwrap();
        g.value(h).data().to_vec()
    };
    let base = run(1.0);
    for (a, b) in run(-3.0).iter().zip(&base) {
        assert!((a + 3.0 * b).abs() < 1e-12);
    }
}

#[test]
fn swapping_branches_inputs_and_output_halves_keeps_o() {
    let d = 6;
    let (spec, p) = fusion_setup(d, 2, Variant::Mdam, 9);
    let mut swapped = p.clone();
    for l in 0..2 {
        for name in ["W_q", "W_H", "W_1", "W_2"] {
            let v = p.get(&block_path(Branch::Frame, l, name)).unwrap().clone();
            let c = p.get(&block_path(Branch::Caption, l, name)).unwrap().clone();
            swapped.insert(block_path(Branch::Frame, l, name), c, false);
            swapped.insert(block_path(Branch::Caption, l, name), v, false);
        }
    }
    let wo = p.get(OUTPUT_PATH).unwrap().data();
    let mut halves = wo[d * d..].to_vec();
    halves.extend_from_slice(&wo[..d * d]);
    swapped.insert(OUTPUT_PATH, Tensor::matrix(2 * d, d, halves).unwrap(), false);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (q, v, c) = (random_vec(&mut rng, d), random_vec(&mut rng, d), random_vec(&mut rng, d));
    let run = |params: &ModelParams, v: &[f64], c: &[f64]| {
        let mut g = Graph::new();
        let qv = g.constant(Tensor::vector(q.clone()).unwrap());
        let vv = g.constant(Tensor::vector(v.to_vec()).unwrap());
        let cv = g.constant(Tensor::vector(c.to_vec()).unwrap());
        let inputs = FusionInputs {
            v: Some(vv),
            c: Some(cv),
            fused: None,
        };
        let o = fuse(&mut g, params, &spec, qv, inputs).unwrap();
        g.value(o).data().to_vec()
    };
    let a = run(&p, &v, &c);
    let b = run(&swapped, &c, &v);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn fusion_gradients_in_isolation() {
    for variant in [Variant::Mdam, Variant::MulFusion, Variant::FrameOnly] {
        let (spec, mut p) = fusion_setup(5, 2, variant, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (q, v, c) = (random_vec(&mut rng, 5), random_vec(&mut rng, 5), random_vec(&mut rng, 5));
        let report = finite_diff_check(
            |g, params| {
                let qv = g.constant(Tensor::vector(q.clone())?);
                let vv = g.constant(Tensor::vector(v.clone())?);
                let cv = g.constant(Tensor::vector(c.clone())?);
                let inputs = FusionInputs {
                    v: Some(vv),
                    c: Some(cv),
                    fused: None,
                };
                let o = fuse(g, params, &spec, qv, inputs)?;
                let sq = g.mul(o, o)?;
                g.sum(sq)
            },
            &mut p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{variant}: {:?}", report.worst);
    }
}

#[test]
fn hand_computed_answer_logit() {
    let mut p = ModelParams::new();
    p.insert(WEIGHT_PATH, Tensor::matrix(4, 1, vec![1.0; 4]).unwrap(), false);
    p.insert(BIAS_PATH, Tensor::vector(vec![0.0]).unwrap(), false);
    let mut g = Graph::new();
    let o = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let rows: Vec<f64> = (0..5).flat_map(|_| [3.0, 4.0]).collect();
    let a = g.constant(Tensor::matrix(5, 2, rows).unwrap());
    let s = score_answers(&mut g, &p, o, a).unwrap();
    // O_A row = [1·3, 2·4, 1+3, 2+4] = [3, 8, 4, 6]
    assert_eq!(g.value(s.logits).data(), &[21.0; 5]);
    assert_eq!(g.value(s.probs).data(), &[0.2; 5]);
}

#[test]
fn answer_scoring_gradients_and_equivariance() {
    let mut p = ModelParams::new();
    init_answer_params(&mut Initializer::new(&mut p, 3), 4);
    p.entry_mut(BIAS_PATH).unwrap().value_mut().data_mut()[0] = 0.4;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let o = random_vec(&mut rng, 4);
    let a = random_vec(&mut rng, 20);
    let report = finite_diff_check(
        |g, params| {
            let ov = g.param(params, "o")?;
            let av = g.param(params, "A")?;
            let s = score_answers(g, params, ov, av)?;
            g.neg_log_pick(s.probs, 2, 1e-12)
        },
        &mut {
            let mut q = p.clone();
            q.insert("o", Tensor::vector(o.clone()).unwrap(), false);
            q.insert("A", Tensor::matrix(5, 4, a.clone()).unwrap(), false);
            // a shared bias cancels in the softmax, so its gradient is exactly zero
            q.set_frozen(BIAS_PATH, true).unwrap();
            q
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{:?}", report.worst);

    let perm = [3, 0, 4, 1, 2];
    let logits_of = |rows: Vec<f64>| {
        let mut g = Graph::new();
        let ov = g.constant(Tensor::vector(o.clone()).unwrap());
        let av = g.constant(Tensor::matrix(5, 4, rows).unwrap());
        let s = score_answers(&mut g, &p, ov, av).unwrap();
        g.value(s.logits).data().to_vec()
    };
    let base = logits_of(a.clone());
    let permuted: Vec<f64> = perm.iter().flat_map(|&j| a[j * 4..(j + 1) * 4].to_vec()).collect();
    let moved = logits_of(permuted);
    for (k, &j) in perm.iter().enumerate() {
        assert_eq!(moved[k], base[j]);
    }
}

#[test]
fn closed_form_softmax_weights() {
    let mut g = Graph::new();
    // pivot · rows / sqrt(1) = [0, ln 2, ln 4]
    let x = g.constant(Tensor::vector(vec![1.0]).unwrap());
    let y = g.constant(Tensor::matrix(3, 1, vec![0.0, 2f64.ln(), 4f64.ln()]).unwrap());
    let (w, _) = dot_prod_attn(&mut g, x, y, &[true; 3]).unwrap();
    for (got, want) in g.value(w).data().iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
        assert!((got - want).abs() < 1e-12);
    }

    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let y = g.constant(Tensor::matrix(4, 2, vec![1.0, 2.0, -3.0, 0.5, 7.0, 7.0, 0.0, 1.0]).unwrap());
    let (w, rows) = dot_prod_attn(&mut g, x, y, &[true, true, false, true]).unwrap();
    let third = 1.0 / 3.0;
    for (got, want) in g.value(w).data().iter().zip([third, third, 0.0, third]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert_eq!(g.value(rows).row(2), &[0.0, 0.0]);
}
