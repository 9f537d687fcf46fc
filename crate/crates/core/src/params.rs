//! Learnable parameters keyed by stable path names.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::Graph;
use crate::error::{MdamError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    value: Arc<Tensor>,
    pub grad: Tensor,
    /// Frozen parameters never accumulate gradient and are skipped by the
    /// optimizer.
    pub frozen: bool,
}

impl Param {
    pub fn new(value: Tensor, frozen: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            value: Arc::new(value),
            grad,
            frozen,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Mutable access; copies the buffer first if a graph still shares it.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }
}

/// All learnable weights of a model. Iteration order is the lexicographic
/// order of the paths, which keeps checkpoints and reductions deterministic.
#[derive(Clone, Debug, Default)]
pub struct ModelParams {
    entries: BTreeMap<String, Param>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((pa, a), (pb, b))| {
                pa == pb && a.frozen == b.frozen && a.value.as_ref() == b.value.as_ref()
            })
    }
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor, frozen: bool) {
        self.entries.insert(path.into(), Param::new(value, frozen));
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn entry(&self, path: &str) -> Result<&Param> {
        self.entries
            .get(path)
            .ok_or_else(|| MdamError::UnknownParam(path.to_string()))
    }

    pub fn entry_mut(&mut self, path: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| MdamError::UnknownParam(path.to_string()))
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path).map(Param::value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Number of scalar weights under a path prefix.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn set_frozen(&mut self, path: &str, frozen: bool) -> Result<()> {
        self.entry_mut(path)?.frozen = frozen;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradients a differentiated graph holds for its parameter
    /// nodes. Frozen parameters are left untouched.
    pub fn accumulate(&mut self, graph: &Graph) -> Result<()> {
        for (path, var) in graph.param_vars() {
            let param = self.entry_mut(path)?;
            if param.frozen {
                continue;
            }
            if let Some(g) = graph.grad(*var) {
                if g.shape() != param.grad.shape() {
                    return Err(MdamError::dim("accumulate", param.grad.shape(), g.shape()));
                }
                param
                    .grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Euclidean norm of all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.grad.norm_sq())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn accumulate_skips_frozen_and_adds_up() {
        let mut params = ModelParams::new();
        params.insert("a", Tensor::ones(&[2]), false);
        params.insert("b", Tensor::ones(&[2]), true);
        for _ in 0..2 {
            let mut g = Graph::new();
            let a = g.param(&params, "a").unwrap();
            let b = g.param(&params, "b").unwrap();
            let p = g.mul(a, b).unwrap();
            let s = g.sum(p).unwrap();
            g.backward(s).unwrap();
            params.accumulate(&g).unwrap();
        }
        assert_eq!(params.entry("a").unwrap().grad.data(), &[2.0, 2.0]);
        assert_eq!(params.entry("b").unwrap().grad.data(), &[0.0, 0.0]);
        params.zero_grads();
        assert_eq!(params.grad_norm(), 0.0);
    }

    #[test]
    fn unknown_path_is_an_error() {
        let params = ModelParams::new();
        let mut g = Graph::new();
        assert!(matches!(g.param(&params, "nope"), Err(MdamError::UnknownParam(_))));
    }

    #[test]
    fn writes_do_not_leak_into_live_graphs() {
        let mut params = ModelParams::new();
        params.insert("w", Tensor::ones(&[1]), false);
        let mut g = Graph::new();
        let w = g.param(&params, "w").unwrap();
        params.entry_mut("w").unwrap().value_mut().data_mut()[0] = 5.0;
        assert_eq!(g.value(w).item(), 1.0);
        assert_eq!(params.get("w").unwrap().item(), 5.0);
    }
}
