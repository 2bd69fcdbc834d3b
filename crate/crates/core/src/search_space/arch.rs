//! Continuous architecture parameters.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Number of edges in a cell with `nodes` intermediate nodes: node `j` has
/// `2 + j` predecessors.
pub fn edge_count(nodes: usize) -> usize {
    (0..nodes).map(|j| 2 + j).sum()
}

/// Index of the first incoming edge of intermediate node `j`.
pub fn edge_offset(j: usize) -> usize {
    (0..j).map(|i| 2 + i).sum()
}

/// Architecture logits `[edges, |O|]` for the normal and reduction cell types,
/// stored as a two-entry [`ParamSet`] so the generic optimizers apply.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    params: ParamSet,
    nodes: usize,
}

pub const NORMAL: usize = 0;
pub const REDUCE: usize = 1;

impl ArchParams {
    /// `1e-3 · N(0, 1)` logits.
    pub fn random<R: Rng>(nodes: usize, ops: usize, rng: &mut R) -> Self {
        let shape = [edge_count(nodes), ops];
        Self::from_tensors(nodes, Tensor::randn(&shape, 1e-3, rng), Tensor::randn(&shape, 1e-3, rng))
    }

    pub fn zeros(nodes: usize, ops: usize) -> Self {
        let shape = [edge_count(nodes), ops];
        Self::from_tensors(nodes, Tensor::zeros(&shape), Tensor::zeros(&shape))
    }

    pub fn from_tensors(nodes: usize, normal: Tensor, reduce: Tensor) -> Self {
        let mut params = ParamSet::new();
        params.push("alpha_normal", normal);
        params.push("alpha_reduce", reduce);
        Self { params, nodes }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn normal(&self) -> &Tensor {
        self.params.get(NORMAL)
    }

    pub fn reduce(&self) -> &Tensor {
        self.params.get(REDUCE)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn tensors(&self) -> &[Tensor] {
        self.params.tensors()
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        self.params.tensors_mut()
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        Ok(Self {
            params: self.params.with_tensors(tensors)?,
            nodes: self.nodes,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind_frozen(tape)
    }

    /// Mean over both cell types and every edge of the softmax entropy.
    pub fn mean_entropy(&self) -> f64 {
        let mut total = 0.0;
        let mut rows = 0;
        for t in self.tensors() {
            for e in 0..t.len0() {
                total += row_entropy(&softmax_row(t.row(e)));
                rows += 1;
            }
        }
        total / rows as f64
    }
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn row_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn four_nodes_have_fourteen_edges() {
        assert_eq!(edge_count(4), 14);
        assert_eq!(edge_offset(3), 9);
        let a = ArchParams::random(4, 7, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(a.normal().shape(), &[14, 7]);
        assert!(a.normal().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn uniform_entropy_is_log_ops() {
        let a = ArchParams::zeros(4, 7);
        assert!((a.mean_entropy() - 7f64.ln()).abs() < 1e-12);
    }
}
