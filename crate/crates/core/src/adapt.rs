//! Adversarial adaptation between a genotype-stacked feature generator and a
//! bank of classifier heads.
//!
//! Every iteration runs three steps: (1) generator and heads minimize the
//! source cross-entropy, (2) the heads alone minimize cross-entropy minus the
//! pairwise L1 disagreement on target data, (3) the generator alone minimizes
//! that disagreement, `r` times. Target labels never enter this module's
//! training paths; they are only read through [`EvalLabels`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{gather, BatchPlan, BatchStream, DomainPair, EvalLabels};
use crate::error::{Error, Result};
use crate::optim::{SgdConfig, SgdState};
use crate::params::ParamSet;
use crate::search_space::{CellSpec, Genotype, Network, NetworkConfig};
use crate::tensor::Tensor;

/// `N` independent two-layer heads: features → hidden → ReLU → K logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierBank {
    heads: usize,
    feature_dim: usize,
    hidden: usize,
    classes: usize,
}

const PER_HEAD: usize = 4;

impl ClassifierBank {
    pub fn new(heads: usize, feature_dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        if heads == 0 || feature_dim == 0 || hidden == 0 || classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "classifier bank needs heads ≥ 1, classes ≥ 2 and positive sizes \
                 (heads {heads}, features {feature_dim}, hidden {hidden}, classes {classes})"
            )));
        }
        Ok(Self {
            heads,
            feature_dim,
            hidden,
            classes,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Uniform `±1/√fan_in` weights; every head gets its own draw.
    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        let (f, h, k) = (self.feature_dim, self.hidden, self.classes);
        for i in 0..self.heads {
            let b1 = 1.0 / (f as f64).sqrt();
            let b2 = 1.0 / (h as f64).sqrt();
            p.push(format!("head{i}.fc1.weight"), Tensor::uniform(&[h, f], b1, rng));
            p.push(format!("head{i}.fc1.bias"), Tensor::uniform(&[h], b1, rng));
            p.push(format!("head{i}.fc2.weight"), Tensor::uniform(&[k, h], b2, rng));
            p.push(format!("head{i}.fc2.bias"), Tensor::uniform(&[k], b2, rng));
        }
        p
    }

    /// Per-head logits `[n, K]`.
    pub fn logits(&self, tape: &mut Tape, c: &[Var], features: Var) -> Result<Vec<Var>> {
        if c.len() != self.heads * PER_HEAD {
            return Err(Error::InvalidArgument(format!(
                "expected {} head tensors, got {}",
                self.heads * PER_HEAD,
                c.len()
            )));
        }
        (0..self.heads)
            .map(|i| {
                let p = &c[i * PER_HEAD..(i + 1) * PER_HEAD];
                let h = tape.linear(features, p[0], Some(p[1]))?;
                let h = tape.relu(h);
                tape.linear(h, p[2], Some(p[3]))
            })
            .collect()
    }

    /// Flattened weights of head `i`, for external embedding.
    pub fn head_vector(&self, params: &ParamSet, i: usize) -> Vec<f64> {
        (0..PER_HEAD)
            .flat_map(|k| params.get(i * PER_HEAD + k).data().iter().copied())
            .collect()
    }
}

/// Mean over heads and batch of `−log p_i(y | x)`.
pub fn source_ce_loss(tape: &mut Tape, logits: &[Var], labels: &[usize]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("no classifier heads".into()));
    }
    let mut total: Option<Var> = None;
    for &l in logits {
        let ce = tape.cross_entropy(l, labels)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / logits.len() as f64))
}

/// Batch mean of `Σ_{i<j} ‖p_i − p_j‖₁` over the heads' probability rows.
pub fn adversarial_loss(tape: &mut Tape, probs: &[Var]) -> Result<Var> {
    if probs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "adversarial loss needs at least 2 heads, got {}",
            probs.len()
        )));
    }
    let mut total: Option<Var> = None;
    for i in 0..probs.len() {
        for j in (i + 1)..probs.len() {
            let d = tape.l1_rows(probs[i], probs[j])?;
            total = Some(match total {
                Some(t) => tape.add(t, d)?,
                None => d,
            });
        }
    }
    Ok(tape.mean(total.expect("at least one pair")))
}

fn softmax_all(tape: &mut Tape, logits: &[Var]) -> Result<Vec<Var>> {
    logits.iter().map(|&l| tape.softmax(l)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Generator shape; `num_classes` is ignored and `affine` forced on.
    pub network: NetworkConfig,
    pub heads: usize,
    pub hidden: usize,
    /// Generator updates per iteration in step three.
    pub repeats: usize,
    pub lr_step1: f64,
    pub lr_step2: f64,
    pub lr_step3: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip applied in every step.
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    pub batch: BatchPlan,
    /// Samples per evaluation forward pass.
    pub eval_batch: usize,
    pub seed: u64,
    /// Skip steps two and three (the control run).
    pub source_only: bool,
}

impl AdaptConfig {
    fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.batch.validate()?;
        if self.heads < 2 && !self.source_only {
            return Err(Error::InvalidArgument(format!(
                "adversarial training needs at least 2 heads, got {}",
                self.heads
            )));
        }
        if self.eval_batch == 0 {
            return Err(Error::InvalidArgument("eval_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Generator, classifier bank and the optimizer state of each step.
#[derive(Clone, Debug)]
pub struct AdaptState {
    pub generator: Network,
    pub g: ParamSet,
    pub bank: ClassifierBank,
    pub c: ParamSet,
    pub step1_g: SgdState,
    pub step1_c: SgdState,
    pub step2_c: SgdState,
    pub step3_g: SgdState,
    pub epoch: usize,
}

impl AdaptState {
    pub fn init(cfg: &AdaptConfig, genotype: &Genotype, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut net_cfg = cfg.network.clone();
        net_cfg.num_classes = 0;
        net_cfg.affine = true;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (generator, g) = Network::build(&net_cfg, CellSpec::Fixed(genotype), &mut rng)?;
        let bank = ClassifierBank::new(cfg.heads, generator.feature_dim(), cfg.hidden, classes)?;
        let c = bank.init(&mut rng);
        Ok(Self {
            step1_g: SgdState::new(cfg.sgd(cfg.lr_step1), g.tensors()),
            step1_c: SgdState::new(cfg.sgd(cfg.lr_step1), c.tensors()),
            step2_c: SgdState::new(cfg.sgd(cfg.lr_step2), c.tensors()),
            step3_g: SgdState::new(cfg.sgd(cfg.lr_step3), g.tensors()),
            generator,
            g,
            bank,
            c,
            epoch: 0,
        })
    }

    fn features(&self, tape: &mut Tape, g: &[Var], x: &Tensor) -> Result<Var> {
        let x = tape.constant(x.clone());
        Ok(self.generator.forward(tape, g, None, x)?.features)
    }

    fn bind(&self, tape: &mut Tape, train_g: bool, train_c: bool) -> (Vec<Var>, Vec<Var>) {
        let g = if train_g { self.g.bind(tape) } else { self.g.bind_frozen(tape) };
        let c = if train_c { self.c.bind(tape) } else { self.c.bind_frozen(tape) };
        (g, c)
    }

    /// Adversarial loss on a target batch at the current parameters.
    pub fn adversarial_value(&self, xt: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let (g, c) = self.bind(&mut tape, false, false);
        let f = self.features(&mut tape, &g, xt)?;
        let logits = self.bank.logits(&mut tape, &c, f)?;
        let probs = softmax_all(&mut tape, &logits)?;
        let adv = adversarial_loss(&mut tape, &probs)?;
        finite("adversarial loss", tape.value(adv).item())
    }

    /// Step one: generator and heads on the source cross-entropy. Returns the loss.
    pub fn step_one(&mut self, xs: &Tensor, ys: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let (g, c) = self.bind(&mut tape, true, true);
        let f = self.features(&mut tape, &g, xs)?;
        let logits = self.bank.logits(&mut tape, &c, f)?;
        let ce = source_ce_loss(&mut tape, &logits, ys)?;
        let value = finite("source cross-entropy", tape.value(ce).item())?;
        let mut grads = tape.backward(ce)?;
        self.step1_g.step(self.g.tensors_mut(), &grads.collect(&g))?;
        self.step1_c.step(self.c.tensors_mut(), &grads.collect(&c))?;
        Ok(value)
    }

    /// Step two: heads only, on cross-entropy minus target disagreement.
    pub fn step_two(&mut self, xs: &Tensor, ys: &[usize], xt: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let (g, c) = self.bind(&mut tape, false, true);
        let fs = self.features(&mut tape, &g, xs)?;
        let ls = self.bank.logits(&mut tape, &c, fs)?;
        let ce = source_ce_loss(&mut tape, &ls, ys)?;
        let ft = self.features(&mut tape, &g, xt)?;
        let lt = self.bank.logits(&mut tape, &c, ft)?;
        let pt = softmax_all(&mut tape, &lt)?;
        let adv = adversarial_loss(&mut tape, &pt)?;
        let loss = tape.sub(ce, adv)?;
        let value = finite("step two loss", tape.value(loss).item())?;
        let mut grads = tape.backward(loss)?;
        self.step2_c.step(self.c.tensors_mut(), &grads.collect(&c))?;
        Ok(value)
    }

    /// One generator update of step three; returns the disagreement before it.
    pub fn step_three(&mut self, xt: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let (g, c) = self.bind(&mut tape, true, false);
        let ft = self.features(&mut tape, &g, xt)?;
        let lt = self.bank.logits(&mut tape, &c, ft)?;
        let pt = softmax_all(&mut tape, &lt)?;
        let adv = adversarial_loss(&mut tape, &pt)?;
        let value = finite("adversarial loss", tape.value(adv).item())?;
        let mut grads = tape.backward(adv)?;
        self.step3_g.step(self.g.tensors_mut(), &grads.collect(&g))?;
        Ok(value)
    }

    /// Averaged head probabilities `[n, K]` and their argmax (ties to the lower class).
    pub fn predict(&self, x: &Tensor, eval_batch: usize) -> Result<(Vec<usize>, Tensor)> {
        let (probs, _) = self.head_probs(x, eval_batch)?;
        Ok((argmax_rows(&probs), probs))
    }

    /// Averaged probabilities and each head's argmax per sample, evaluated in
    /// fixed consecutive chunks of `eval_batch` rows.
    fn head_probs(&self, x: &Tensor, eval_batch: usize) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let n = x.len0();
        let k = self.bank.classes();
        let mut avg = Vec::with_capacity(n * k);
        let mut per_head = vec![Vec::with_capacity(n); self.bank.heads()];
        let mut start = 0;
        while start < n {
            let end = (start + eval_batch).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let (g, c) = self.bind(&mut tape, false, false);
            let f = self.features(&mut tape, &g, &x.select(&idx))?;
            let logits = self.bank.logits(&mut tape, &c, f)?;
            let probs = softmax_all(&mut tape, &logits)?;
            let mut sum = Tensor::zeros(&[end - start, k]);
            for (h, &p) in probs.iter().enumerate() {
                sum.axpy(1.0, tape.value(p))?;
                per_head[h].extend(argmax_rows(tape.value(p)));
            }
            avg.extend(sum.scaled(1.0 / probs.len() as f64).into_data());
            start = end;
        }
        Ok((Tensor::new(vec![n, k], avg)?, per_head))
    }
}

fn finite(context: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            context: context.into(),
            value: v,
        })
    }
}

/// Row-wise argmax; the first maximum wins.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Averaged probabilities of a set of per-head probability rows `[n, K]`.
pub fn average_probs(probs: &[Tensor]) -> Result<Tensor> {
    let first = probs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no heads to average".into()))?;
    let mut sum = Tensor::zeros(first.shape());
    for p in probs {
        sum.axpy(1.0, p)?;
    }
    Ok(sum.scaled(1.0 / probs.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub ce: f64,
    /// Disagreement right after the head update (before the first generator update).
    pub adv_after_step2: f64,
    /// Disagreement after the last generator update.
    pub adv_after_step3: f64,
}

/// One full iteration of the three steps.
pub fn adapt_step(state: &mut AdaptState, cfg: &AdaptConfig, xs: &Tensor, ys: &[usize], xt: &Tensor) -> Result<StepMetrics> {
    let ce = state.step_one(xs, ys)?;
    if cfg.source_only {
        return Ok(StepMetrics {
            ce,
            adv_after_step2: f64::NAN,
            adv_after_step3: f64::NAN,
        });
    }
    state.step_two(xs, ys, xt)?;
    let mut adv_after_step2 = None;
    for _ in 0..cfg.repeats {
        let before = state.step_three(xt)?;
        adv_after_step2.get_or_insert(before);
    }
    let adv_after_step3 = state.adversarial_value(xt)?;
    Ok(StepMetrics {
        ce,
        adv_after_step2: adv_after_step2.unwrap_or(adv_after_step3),
        adv_after_step3,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epoch: usize,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    /// Fraction of (target sample, head pair) combinations whose argmax differ.
    pub disagreement: f64,
}

/// Accuracies of the averaged ensemble. Target labels are read only here.
pub fn evaluate(state: &AdaptState, cfg: &AdaptConfig, pair: &DomainPair) -> Result<EvalReport> {
    let (src_pred, _) = state.predict(&pair.source.x, cfg.eval_batch)?;
    let source_accuracy = EvalLabels::new(pair.source.y.clone()).accuracy(&src_pred)?;
    let (avg, heads) = state.head_probs(&pair.target.x, cfg.eval_batch)?;
    let target_accuracy = pair.target.labels.accuracy(&argmax_rows(&avg))?;
    let n = pair.target.len();
    let (mut differ, mut total) = (0usize, 0usize);
    for i in 0..heads.len() {
        for j in (i + 1)..heads.len() {
            differ += (0..n).filter(|&s| heads[i][s] != heads[j][s]).count();
            total += n;
        }
    }
    Ok(EvalReport {
        epoch: state.epoch,
        source_accuracy,
        target_accuracy,
        disagreement: if total == 0 { 0.0 } else { differ as f64 / total as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub ce: f64,
    pub adv_after_step2: f64,
    pub adv_after_step3: f64,
    pub eval: EvalReport,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub state: AdaptState,
    pub history: Vec<AdaptEpochMetrics>,
    pub report: EvalReport,
}

/// Trains for `cfg.epochs` epochs, evaluating after each. `on_epoch` receives
/// the state and metrics after every epoch (checkpoints, head snapshots).
pub fn run_adapt(
    cfg: &AdaptConfig,
    genotype: &Genotype,
    pair: &DomainPair,
    on_epoch: &mut dyn FnMut(&AdaptState, &AdaptEpochMetrics) -> Result<()>,
) -> Result<AdaptOutcome> {
    pair.validate()?;
    if pair.input_shape()[0] != cfg.network.in_channels {
        return Err(Error::ClassMismatch(format!(
            "data has {} channels, generator expects {}",
            pair.input_shape()[0],
            cfg.network.in_channels
        )));
    }
    if cfg.network.num_classes != 0 && cfg.network.num_classes != pair.classes {
        return Err(Error::ClassMismatch(format!(
            "config expects {} classes, data has {}",
            cfg.network.num_classes, pair.classes
        )));
    }
    let mut state = AdaptState::init(cfg, genotype, pair.classes)?;
    let stream = BatchStream::for_pair(pair, cfg.batch)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let batches = stream.adapt_epoch(state.epoch as u64);
        let (mut ce, mut a2, mut a3) = (0.0, 0.0, 0.0);
        for b in &batches {
            let (xs, ys) = gather(&pair.source, &b.source);
            let xt = pair.target.x.select(&b.target);
            let m = adapt_step(&mut state, cfg, &xs, &ys, &xt)?;
            ce += m.ce;
            a2 += m.adv_after_step2;
            a3 += m.adv_after_step3;
        }
        state.epoch += 1;
        let denom = batches.len().max(1) as f64;
        let metrics = AdaptEpochMetrics {
            epoch: state.epoch,
            steps: batches.len(),
            ce: ce / denom,
            adv_after_step2: a2 / denom,
            adv_after_step3: a3 / denom,
            eval: evaluate(&state, cfg, pair)?,
        };
        on_epoch(&state, &metrics)?;
        history.push(metrics);
    }
    let report = match history.last() {
        Some(m) => m.eval.clone(),
        None => evaluate(&state, cfg, pair)?,
    };
    Ok(AdaptOutcome { state, history, report })
}
