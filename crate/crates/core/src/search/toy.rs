//! A two-layer dense supergraph small enough for brute-force gradient oracles.

use rand::Rng;

use super::{SearchModel, SourceBatch};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::mmd::{mmd2_linear_on_tape, KernelBank};
use crate::tensor::Tensor;

/// Two mixed layers over `{dense + relu, dense, identity, zero}` on `[n, d]`
/// inputs, followed by a linear classifier. `α` is a single `[2, 4]` tensor.
/// The discrepancy uses a fixed kernel bank so it is a smooth function of
/// `(w, α)`.
#[derive(Clone, Debug)]
pub struct ToySupernet {
    pub dim: usize,
    pub classes: usize,
    pub bank: KernelBank,
}

pub const TOY_OPS: usize = 4;

impl ToySupernet {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            classes,
            bank: KernelBank::uniform(vec![0.25, 1.0]).expect("valid bank"),
        }
    }

    /// `[W1a, W1b, W2a, W2b, Wc, bc]`.
    pub fn init_weights<R: Rng>(&self, rng: &mut R) -> Vec<Tensor> {
        let d = self.dim;
        let std = (1.0 / d as f64).sqrt();
        vec![
            Tensor::randn(&[d, d], std, rng),
            Tensor::randn(&[d, d], std, rng),
            Tensor::randn(&[d, d], std, rng),
            Tensor::randn(&[d, d], std, rng),
            Tensor::randn(&[self.classes, d], std, rng),
            Tensor::zeros(&[self.classes]),
        ]
    }

    pub fn init_alpha<R: Rng>(&self, rng: &mut R) -> Vec<Tensor> {
        vec![Tensor::randn(&[2, TOY_OPS], 0.5, rng)]
    }

    pub fn features(&self, tape: &mut Tape, w: &[Var], alpha: &[Var], x: Var) -> Result<Var> {
        let p = tape.softmax(alpha[0])?;
        let mut h = x;
        for layer in 0..2 {
            let a = tape.linear(h, w[2 * layer], None)?;
            let a = tape.relu(a);
            let b = tape.linear(h, w[2 * layer + 1], None)?;
            let base = layer * TOY_OPS;
            h = tape.weighted_sum(&[(a, base), (b, base + 1), (h, base + 2)], p)?;
        }
        Ok(h)
    }
}

impl SearchModel for ToySupernet {
    fn source_loss(&self, tape: &mut Tape, w: &[Var], alpha: &[Var], batch: &SourceBatch) -> Result<Var> {
        let x = tape.constant(batch.x.clone());
        let f = self.features(tape, w, alpha, x)?;
        let logits = tape.linear(f, w[4], Some(w[5]))?;
        tape.cross_entropy(logits, &batch.y)
    }

    fn discrepancy(&self, tape: &mut Tape, w: &[Var], alpha: &[Var], source: &Tensor, target: &Tensor) -> Result<Var> {
        let xs = tape.constant(source.clone());
        let xt = tape.constant(target.clone());
        let fs = self.features(tape, w, alpha, xs)?;
        let ft = self.features(tape, w, alpha, xt)?;
        mmd2_linear_on_tape(tape, fs, ft, &self.bank)
    }
}
