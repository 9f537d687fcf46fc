//! Late multimodal fusion through deep residual blocks.
//!
//! Each block starts from `H⁽⁰⁾ = q` and applies, for `l = 1..L_m`,
//!
//! ```text
//! H⁽ˡ⁾ = H⁽ˡ⁻¹⁾ W_q⁽ˡ⁾ + tanh(H⁽ˡ⁻¹⁾ W_H⁽ˡ⁾) ⊙ tanh(tanh(x W_1⁽ˡ⁾) W_2⁽ˡ⁾)
//! ```
//!
//! The frame block and the caption block have separate weights; their
//! outputs are concatenated and projected to `o = tanh([H_v, H_c] W_o)`.

use crate::autodiff::{Graph, Var};
use crate::config::{Variant, VariantSpec};
use crate::error::{MdamError, Result};
use crate::layers::Initializer;
use crate::params::ModelParams;

pub const OUTPUT_PATH: &str = "fusion.W_o";

/// Which modality vector a residual block combines with the question.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Frame,
    Caption,
    /// Output of the single early-fused stream.
    Fused,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Frame => "fusion.v",
            Branch::Caption => "fusion.c",
            Branch::Fused => "fusion.f",
        }
    }
}

pub fn block_path(branch: Branch, layer: usize, name: &str) -> String {
    format!("{}.layer{layer}.{name}", branch.prefix())
}

/// Residual branches used by a variant, in concatenation order.
pub fn branches(variant: Variant) -> &'static [Branch] {
    match variant {
        Variant::Mdam | Variant::NoSelfAttn => &[Branch::Frame, Branch::Caption],
        Variant::FrameOnly => &[Branch::Frame],
        Variant::CaptOnly => &[Branch::Caption],
        Variant::EarlyFusion => &[Branch::Fused],
        Variant::MulFusion => &[],
    }
}

pub fn init_fusion_params(init: &mut Initializer<'_>, spec: &VariantSpec) {
    let d = spec.d_model;
    for &b in branches(spec.variant) {
        for l in 0..spec.fusion_depth {
            for name in ["W_q", "W_H", "W_1", "W_2"] {
                init.xavier(block_path(b, l, name), d, d);
            }
            if spec.fusion_bias {
                for name in ["b_q", "b_H", "b_1", "b_2"] {
                    init.zeros(block_path(b, l, name), &[d]);
                }
            }
        }
    }
    let inputs = match spec.variant {
        Variant::MulFusion => 2,
        v => branches(v).len(),
    };
    init.xavier(OUTPUT_PATH, inputs * d, d);
}

fn affine(g: &mut Graph, params: &ModelParams, x: Var, branch: Branch, layer: usize, w: &str, b: &str) -> Result<Var> {
    let wv = g.param(params, &block_path(branch, layer, w))?;
    let y = g.matmul(x, wv)?;
    let bp = block_path(branch, layer, b);
    if params.contains(&bp) {
        let bv = g.param(params, &bp)?;
        g.add_row(y, bv)
    } else {
        Ok(y)
    }
}

/// `tanh(H W_H) ⊙ tanh(tanh(x W_1) W_2)` for one depth.
pub fn residual_gate(g: &mut Graph, params: &ModelParams, branch: Branch, layer: usize, h: Var, x: Var) -> Result<Var> {
    if g.shape(h) != g.shape(x) {
        return Err(MdamError::dim("residual_gate", g.shape(h), g.shape(x)));
    }
    let left = affine(g, params, h, branch, layer, "W_H", "b_H")?;
    let left = g.tanh(left)?;
    let inner = affine(g, params, x, branch, layer, "W_1", "b_1")?;
    let inner = g.tanh(inner)?;
    let right = affine(g, params, inner, branch, layer, "W_2", "b_2")?;
    let right = g.tanh(right)?;
    g.mul(left, right)
}

/// Unrolled residual recursion of depth `depth` seeded with `H⁽⁰⁾ = q`.
pub fn deep_residual(g: &mut Graph, params: &ModelParams, branch: Branch, depth: usize, q: Var, x: Var) -> Result<Var> {
    if depth == 0 {
        return Err(MdamError::Config("fusion depth must be at least 1".into()));
    }
    let mut h = q;
    for l in 0..depth {
        let skip = affine(g, params, h, branch, l, "W_q", "b_q")?;
        let gate = residual_gate(g, params, branch, l, h, x)?;
        h = g.add(skip, gate)?;
    }
    Ok(h)
}

/// Modality vectors reaching the fusion step. Which ones must be present
/// depends on the variant.
#[derive(Clone, Copy, Debug, Default)]
pub struct FusionInputs {
    pub v: Option<Var>,
    pub c: Option<Var>,
    pub fused: Option<Var>,
}

fn need(v: Option<Var>, what: &str) -> Result<Var> {
    v.ok_or_else(|| MdamError::Argument(format!("fusion input {what} missing")))
}

/// Combines the question with the attended modality vectors into `o`.
pub fn fuse(g: &mut Graph, params: &ModelParams, spec: &VariantSpec, q: Var, inputs: FusionInputs) -> Result<Var> {
    let parts = match spec.variant {
        Variant::MulFusion => {
            let qv = g.mul(q, need(inputs.v, "v")?)?;
            let qc = g.mul(q, need(inputs.c, "c")?)?;
            vec![qv, qc]
        }
        v => {
            let mut parts = Vec::new();
            for &b in branches(v) {
                let x = match b {
                    Branch::Frame => need(inputs.v, "v")?,
                    Branch::Caption => need(inputs.c, "c")?,
                    Branch::Fused => need(inputs.fused, "fused")?,
                };
                parts.push(deep_residual(g, params, b, spec.fusion_depth, q, x)?);
            }
            parts
        }
    };
    let joined = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
    let wo = g.param(params, OUTPUT_PATH)?;
    let y = g.matmul(joined, wo)?;
    g.tanh(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn spec(width: usize, depth: usize) -> VariantSpec {
        VariantSpec {
            d_model: width,
            fusion_depth: depth,
            ..VariantSpec::desk()
        }
    }

    fn setup(width: usize, depth: usize, seed: u64) -> (VariantSpec, ModelParams) {
        let s = spec(width, depth);
        let mut p = ModelParams::new();
        init_fusion_params(&mut Initializer::new(&mut p, seed), &s);
        (s, p)
    }

    fn rand_vec(n: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn gate_annihilators() {
        let (_, p) = setup(4, 1, 0);
        let mut g = Graph::new();
        let h = g.constant(rand_vec(4, 1));
        let zero = g.constant(Tensor::zeros(&[4]));
        let a = residual_gate(&mut g, &p, Branch::Frame, 0, h, zero).unwrap();
        let b = residual_gate(&mut g, &p, Branch::Frame, 0, zero, h).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 0.0));
        assert!(g.value(b).data().iter().all(|&v| v == 0.0));
        let x = g.constant(rand_vec(4, 2));
        let c = residual_gate(&mut g, &p, Branch::Frame, 0, h, x).unwrap();
        assert!(g.value(c).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn zero_modality_input_leaves_the_linear_path() {
        let (_, p) = setup(4, 3, 3);
        let mut g = Graph::new();
        let q = g.constant(rand_vec(4, 4));
        let q2 = g.scale(q, 2.5).unwrap();
        let zero = g.constant(Tensor::zeros(&[4]));
        let h = deep_residual(&mut g, &p, Branch::Caption, 3, q, zero).unwrap();
        let h2 = deep_residual(&mut g, &p, Branch::Caption, 3, q2, zero).unwrap();
        let mut lin = q;
        for l in 0..3 {
            let w = g.param(&p, &block_path(Branch::Caption, l, "W_q")).unwrap();
            lin = g.matmul(lin, w).unwrap();
        }
        assert!(g.value(h).max_abs_diff(g.value(lin)) < 1e-15);
        for (a, b) in g.value(h2).data().iter().zip(g.value(h).data()) {
            assert!((a - 2.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_depth_is_a_config_error() {
        let (_, p) = setup(4, 1, 0);
        let mut g = Graph::new();
        let q = g.constant(rand_vec(4, 0));
        assert!(matches!(
            deep_residual(&mut g, &p, Branch::Frame, 0, q, q),
            Err(MdamError::Config(_))
        ));
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let (s, mut p) = setup(6, 2, 0);
        for (_, v) in p.iter_mut() {
            v.value_mut().data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let q = g.constant(rand_vec(6, 1));
        let v = g.constant(rand_vec(6, 2));
        let c = g.constant(rand_vec(6, 3));
        let o = fuse(&mut g, &p, &s, q, FusionInputs { v: Some(v), c: Some(c), fused: None }).unwrap();
        assert_eq!(g.shape(o), &[6]);
        assert!(g.value(o).data().iter().all(|&x| x == 0.0));
    }
}
