//! Shared building blocks: Xavier initialization and the masked
//! convolution/max-pool encoder used both for sentences and for story
//! aggregation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{MdamError, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// `sqrt(6 / (fan_in + fan_out))`
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Registers freshly initialized parameters. Matrices are drawn uniformly in
/// the Xavier range, biases start at zero and layer-norm gains at one.
pub struct Initializer<'a> {
    params: &'a mut ModelParams,
    rng: ChaCha8Rng,
}

impl<'a> Initializer<'a> {
    pub fn new(params: &'a mut ModelParams, seed: u64) -> Self {
        Initializer {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn xavier(&mut self, path: impl Into<String>, rows: usize, cols: usize) {
        let bound = xavier_bound(rows, cols);
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::matrix(rows, cols, data).expect("positive dims");
        self.params.insert(path, t, false);
    }

    pub fn zeros(&mut self, path: impl Into<String>, shape: &[usize]) {
        self.params.insert(path, Tensor::zeros(shape), false);
    }

    pub fn ones(&mut self, path: impl Into<String>, shape: &[usize]) {
        self.params.insert(path, Tensor::ones(shape), false);
    }

    pub fn tensor(&mut self, path: impl Into<String>, value: Tensor, frozen: bool) {
        self.params.insert(path, value, frozen);
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// A bank of 1-D convolution filters, one filter matrix per window width.
/// Parameters live at `{prefix}.w{width}` (`[width·d_in × filters]`) and
/// `{prefix}.b{width}` (`[filters]`).
#[derive(Clone, Debug)]
pub struct ConvBank {
    pub prefix: String,
    pub windows: Vec<usize>,
    pub input_dim: usize,
    pub filters: usize,
}

impl ConvBank {
    pub fn new(prefix: impl Into<String>, windows: &[usize], input_dim: usize, filters: usize) -> Self {
        ConvBank {
            prefix: prefix.into(),
            windows: windows.to_vec(),
            input_dim,
            filters,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.windows.len() * self.filters
    }

    pub fn weight_path(&self, width: usize) -> String {
        format!("{}.w{}", self.prefix, width)
    }

    pub fn bias_path(&self, width: usize) -> String {
        format!("{}.b{}", self.prefix, width)
    }

    pub fn init(&self, init: &mut Initializer<'_>) {
        for &w in &self.windows {
            init.xavier(self.weight_path(w), w * self.input_dim, self.filters);
            init.zeros(self.bias_path(w), &[self.filters]);
        }
    }

    /// See [`conv1d_maxpool`].
    pub fn apply(&self, g: &mut Graph, params: &ModelParams, x: Var, pos_mask: &[bool]) -> Result<Var> {
        conv1d_maxpool(g, params, self, x, pos_mask)
    }
}

/// Window start positions whose whole span lies on valid positions.
pub fn valid_window_starts(pos_mask: &[bool], width: usize) -> Vec<usize> {
    if width == 0 || width > pos_mask.len() {
        return Vec::new();
    }
    (0..=pos_mask.len() - width)
        .filter(|&s| pos_mask[s..s + width].iter().all(|&m| m))
        .collect()
}

/// Slides every window width of `bank` along the rows of `x` (`[T×d_in]`),
/// applies ReLU and max-pools each filter over the windows that touch only
/// valid positions. Widths without any such window contribute zeros. The
/// result concatenates the per-width outputs.
pub fn conv1d_maxpool(
    g: &mut Graph,
    params: &ModelParams,
    bank: &ConvBank,
    x: Var,
    pos_mask: &[bool],
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != pos_mask.len() || shape[1] != bank.input_dim {
        return Err(MdamError::dim("conv1d_maxpool", &shape, &[pos_mask.len(), bank.input_dim]));
    }
    if !pos_mask.iter().any(|&m| m) {
        return Err(MdamError::EmptySequence("no valid position to convolve".into()));
    }
    let mut outputs = Vec::with_capacity(bank.windows.len());
    for &w in &bank.windows {
        let starts = valid_window_starts(pos_mask, w);
        if starts.is_empty() {
            outputs.push(g.constant(Tensor::zeros(&[bank.filters])));
            continue;
        }
        let weight = g.param(params, &bank.weight_path(w))?;
        let bias = g.param(params, &bank.bias_path(w))?;
        let windows = g.unfold(x, w, &starts)?;
        let pre = g.matmul(windows, weight)?;
        let pre = g.add_row(pre, bias)?;
        let act = g.relu(pre)?;
        outputs.push(g.max_rows(act)?);
    }
    g.concat(&outputs)
}
