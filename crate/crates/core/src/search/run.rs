//! Search on the cell supernet: state, epochs and the full run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{arch_gradient, check_finite, source_loss_grads, ArchGradConfig, SearchModel, SourceBatch, StepBatch};
use crate::autodiff::{Tape, Var};
use crate::data::{gather, BatchPlan, BatchStream, DomainPair, SearchBatch};
use crate::error::{Error, Result};
use crate::mmd::{median_heuristic, mmd2_linear_on_tape, mmd2_quadratic, EstimatorKind};
use crate::optim::{AdamConfig, AdamState, SgdConfig, SgdState};
use crate::params::ParamSet;
use crate::search_space::{ArchParams, CandidateOpSet, CellSpec, Genotype, Network, NetworkConfig};
use crate::tensor::Tensor;

/// The search supernet as a [`SearchModel`]. The discrepancy runs source and
/// target through one forward pass so both share batch-norm statistics, and
/// uses a median-heuristic kernel bank fitted to the detached features.
#[derive(Clone, Debug)]
pub struct SupernetModel {
    pub net: Network,
}

impl SupernetModel {
    /// Pooled features of the concatenation `[source; target]`.
    fn joint_features(&self, tape: &mut Tape, w: &[Var], alpha: &[Var], source: &Tensor, target: &Tensor)
        -> Result<(Var, usize)> {
        let x = tape.constant(Tensor::concat0(&[source, target])?);
        let out = self.net.forward(tape, w, Some(alpha), x)?;
        Ok((out.features, source.len0()))
    }

    /// Detached source and target features from one joint forward pass.
    pub fn features(&self, w: &[Tensor], alpha: &[Tensor], source: &Tensor, target: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let wv: Vec<Var> = w.iter().map(|t| tape.constant(t.clone())).collect();
        let av: Vec<Var> = alpha.iter().map(|t| tape.constant(t.clone())).collect();
        let (f, m) = self.joint_features(&mut tape, &wv, &av, source, target)?;
        let f = tape.value(f);
        let src: Vec<usize> = (0..m).collect();
        let tgt: Vec<usize> = (m..f.len0()).collect();
        Ok((f.select(&src), f.select(&tgt)))
    }
}

impl SearchModel for SupernetModel {
    fn source_loss(&self, tape: &mut Tape, w: &[Var], alpha: &[Var], batch: &SourceBatch) -> Result<Var> {
        let x = tape.constant(batch.x.clone());
        let out = self.net.forward(tape, w, Some(alpha), x)?;
        let logits = out
            .logits
            .ok_or_else(|| Error::InvalidArgument("search network needs a classifier".into()))?;
        tape.cross_entropy(logits, &batch.y)
    }

    fn discrepancy(&self, tape: &mut Tape, w: &[Var], alpha: &[Var], source: &Tensor, target: &Tensor) -> Result<Var> {
        let (f, m) = self.joint_features(tape, w, alpha, source, target)?;
        let n = tape.value(f).len0();
        let bank = median_heuristic(tape.value(f))?.bank;
        let fs = tape.gather_rows(f, &(0..m).collect::<Vec<_>>())?;
        let ft = tape.gather_rows(f, &(m..n).collect::<Vec<_>>())?;
        mmd2_linear_on_tape(tape, fs, ft, &bank)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub network: NetworkConfig,
    pub grad: ArchGradConfig,
    /// Learning rate of the weight updates. The virtual step uses `grad.xi`,
    /// which normally equals this value.
    pub weight_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub arch_optimizer: AdamConfig,
    pub epochs: usize,
    pub batch: BatchPlan,
    pub seed: u64,
}

impl SearchConfig {
    pub fn weight_optimizer(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.weight_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.batch.validate()?;
        if !(self.grad.xi >= 0.0 && self.grad.lambda >= 0.0 && self.weight_lr >= 0.0) {
            return Err(Error::InvalidArgument("xi, lambda and weight_lr must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything a search run mutates.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub weights: ParamSet,
    pub alpha: ArchParams,
    pub weight_opt: SgdState,
    pub arch_opt: AdamState,
    pub epoch: usize,
}

impl SearchState {
    /// Fresh supernet and state from the config seed.
    pub fn init(cfg: &SearchConfig, ops: &CandidateOpSet) -> Result<(SupernetModel, Self)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (net, weights) = Network::build(&cfg.network, CellSpec::Search(ops), &mut rng)?;
        let alpha = net.init_arch(&mut rng)?;
        let state = Self {
            weight_opt: SgdState::new(cfg.weight_optimizer(), weights.tensors()),
            arch_opt: AdamState::new(cfg.arch_optimizer, alpha.tensors()),
            weights,
            alpha,
            epoch: 0,
        };
        Ok((SupernetModel { net }, state))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub mmd: f64,
    /// Mean per-edge softmax entropy of `α` after the epoch.
    pub alpha_entropy: f64,
    pub truncated: bool,
}

pub(crate) fn step_batch(pair: &DomainPair, b: &SearchBatch) -> StepBatch {
    let (xt, yt) = gather(&pair.source, &b.train);
    let (xv, yv) = gather(&pair.source, &b.val);
    StepBatch {
        train: SourceBatch { x: xt, y: yt },
        val: SourceBatch { x: xv, y: yv },
        target: pair.target.x.select(&b.target),
    }
}

/// One pass over the batch stream: per step an `α` update from the
/// architecture gradient, then a weight update on the training loss at the new `α`.
pub fn search_epoch(
    model: &SupernetModel,
    state: &mut SearchState,
    cfg: &SearchConfig,
    pair: &DomainPair,
    stream: &BatchStream,
) -> Result<EpochMetrics> {
    let epoch = stream.search_epoch(state.epoch as u64);
    let (mut train_loss, mut val_loss, mut mmd) = (0.0, 0.0, 0.0);
    for b in &epoch.batches {
        let batch = step_batch(pair, b);
        let ag = arch_gradient(model, state.weights.tensors(), state.alpha.tensors(), &batch, &cfg.grad)?;
        let step_mmd = if cfg.grad.lambda > 0.0 {
            ag.discrepancy
        } else {
            // Not part of the gradient; evaluated for the metrics only.
            let mut tape = Tape::new();
            let w = state.weights.bind_frozen(&mut tape);
            let a = state.alpha.bind_frozen(&mut tape);
            let d = model.discrepancy(&mut tape, &w, &a, &batch.val.x, &batch.target)?;
            check_finite("discrepancy", tape.value(d).item())?
        };
        state.arch_opt.step(state.alpha.tensors_mut(), &ag.grad)?;

        let g = source_loss_grads(model, state.weights.tensors(), state.alpha.tensors(), &batch.train, true, false)?;
        state.weight_opt.step(state.weights.tensors_mut(), &g.w.expect("requested"))?;
        if !state.weights.is_finite() {
            return Err(Error::NonFinite {
                context: "weights after update".into(),
                value: f64::NAN,
            });
        }
        train_loss += g.loss;
        val_loss += ag.val_loss;
        mmd += step_mmd;
    }
    let steps = epoch.batches.len();
    let denom = steps.max(1) as f64;
    state.epoch += 1;
    Ok(EpochMetrics {
        epoch: state.epoch,
        steps,
        train_loss: train_loss / denom,
        val_loss: val_loss / denom,
        mmd: mmd / denom,
        alpha_entropy: state.alpha.mean_entropy(),
        truncated: epoch.truncated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchAbort {
    /// Epoch (1-based) during which the failure happened.
    pub epoch: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub model: SupernetModel,
    /// State after the last completed epoch.
    pub state: SearchState,
    pub history: Vec<EpochMetrics>,
    /// Discretized cell; `None` when the run aborted.
    pub genotype: Option<Genotype>,
    pub abort: Option<SearchAbort>,
}

/// Runs `cfg.epochs` search epochs and discretizes the result. `on_epoch` is
/// called after every completed epoch (for checkpoints and metrics). A
/// non-finite loss ends the run early with the last completed state.
pub fn run_search(
    cfg: &SearchConfig,
    ops: &CandidateOpSet,
    pair: &DomainPair,
    on_epoch: &mut dyn FnMut(&SearchState, &EpochMetrics) -> Result<()>,
) -> Result<SearchOutcome> {
    if pair.classes != cfg.network.num_classes {
        return Err(Error::ClassMismatch(format!(
            "data has {} classes, network {}",
            pair.classes, cfg.network.num_classes
        )));
    }
    if pair.input_shape()[0] != cfg.network.in_channels {
        return Err(Error::InvalidArgument(format!(
            "data has {} channels, network expects {}",
            pair.input_shape()[0],
            cfg.network.in_channels
        )));
    }
    let (model, mut state) = SearchState::init(cfg, ops)?;
    let stream = BatchStream::for_pair(pair, cfg.batch)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let last_good = state.clone();
        match search_epoch(&model, &mut state, cfg, pair, &stream) {
            Ok(m) => {
                on_epoch(&state, &m)?;
                history.push(m);
            }
            Err(e @ Error::NonFinite { .. }) => {
                log::error!("search aborted in epoch {}: {e}", last_good.epoch + 1);
                return Ok(SearchOutcome {
                    model,
                    abort: Some(SearchAbort {
                        epoch: last_good.epoch + 1,
                        message: e.to_string(),
                    }),
                    state: last_good,
                    history,
                    genotype: None,
                });
            }
            Err(e) => return Err(e),
        }
    }
    let genotype = Genotype::discretize(&state.alpha, ops, cfg.network.init_channels, cfg.network.layers)?;
    Ok(SearchOutcome {
        model,
        state,
        history,
        genotype: Some(genotype),
        abort: None,
    })
}

/// Unbiased quadratic MMD² between supernet features of two held-out sets,
/// with a median-heuristic bank.
pub fn feature_mmd(model: &SupernetModel, state: &SearchState, source: &Tensor, target: &Tensor) -> Result<f64> {
    let (fs, ft) = model.features(state.weights.tensors(), state.alpha.tensors(), source, target)?;
    let bank = median_heuristic(&Tensor::concat0(&[&fs, &ft])?)?.bank;
    Ok(mmd2_quadratic(&fs, &ft, &bank, EstimatorKind::QuadraticUnbiased)?.value)
}
