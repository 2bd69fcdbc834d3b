//! Bilevel architecture search.
//!
//! The architecture gradient is
//! `∇_α L_val(w′, α) − ξ · H + λ · ∇_α MMD(w, α)` with the virtual step
//! `w′ = w − ξ ∇_w L_train(w, α)` and `H` the central-difference estimate of
//! `∇²_{α,w} L_train(w, α) · ∇_{w′} L_val(w′, α)`. All functions take the
//! weights by shared reference, so `w` cannot be perturbed in place.

mod run;
mod toy;

pub use run::{
    feature_mmd, run_search, search_epoch, EpochMetrics, SearchAbort, SearchConfig, SearchOutcome, SearchState,
    SupernetModel,
};
pub use toy::ToySupernet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{axpy_all, global_norm};
use crate::tensor::Tensor;

/// Labeled source images.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Inputs of one search step. The target batch carries no labels.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    pub train: SourceBatch,
    pub val: SourceBatch,
    pub target: Tensor,
}

/// A differentiable model with weights `w` and architecture parameters `α`.
pub trait SearchModel {
    /// Mean classification loss on a source batch.
    fn source_loss(&self, tape: &mut Tape, w: &[Var], alpha: &[Var], batch: &SourceBatch) -> Result<Var>;

    /// Squared feature discrepancy between a source and a target batch.
    fn discrepancy(&self, tape: &mut Tape, w: &[Var], alpha: &[Var], source: &Tensor, target: &Tensor)
        -> Result<Var>;
}

/// Perturbation size of the central-difference product.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum EtaMode {
    /// `η = c / ‖v‖`.
    AnalyticRatio(f64),
    Fixed(f64),
}

impl Default for EtaMode {
    fn default() -> Self {
        EtaMode::AnalyticRatio(0.01)
    }
}

impl EtaMode {
    pub fn eta(&self, v_norm: f64) -> f64 {
        match *self {
            EtaMode::AnalyticRatio(c) => c / v_norm,
            EtaMode::Fixed(e) => e,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchGradConfig {
    /// Virtual step size.
    pub xi: f64,
    /// Weight of the discrepancy term.
    pub lambda: f64,
    pub eta: EtaMode,
}

impl Default for ArchGradConfig {
    fn default() -> Self {
        Self {
            xi: 0.025,
            lambda: 1.0,
            eta: EtaMode::default(),
        }
    }
}

pub(crate) fn check_finite(context: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
            value,
        })
    }
}

/// Loss value with gradients with respect to `w` and/or `α`.
pub struct LossGrads {
    pub loss: f64,
    pub w: Option<Vec<Tensor>>,
    pub alpha: Option<Vec<Tensor>>,
}

/// Evaluates the source loss, recording gradients only for the requested groups.
pub fn source_loss_grads<M: SearchModel + ?Sized>(
    model: &M,
    w: &[Tensor],
    alpha: &[Tensor],
    batch: &SourceBatch,
    wrt_w: bool,
    wrt_alpha: bool,
) -> Result<LossGrads> {
    let mut tape = Tape::new();
    let bind = |tape: &mut Tape, ts: &[Tensor], track: bool| -> Vec<Var> {
        ts.iter()
            .map(|t| if track { tape.parameter(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    };
    let wv = bind(&mut tape, w, wrt_w);
    let av = bind(&mut tape, alpha, wrt_alpha);
    let loss = model.source_loss(&mut tape, &wv, &av, batch)?;
    let value = check_finite("source loss", tape.value(loss).item())?;
    let mut grads = tape.backward(loss)?;
    Ok(LossGrads {
        loss: value,
        w: wrt_w.then(|| grads.collect(&wv)),
        alpha: wrt_alpha.then(|| grads.collect(&av)),
    })
}

/// `w′ = w − ξ ∇_w L_train(w, α)`.
pub fn virtual_step<M: SearchModel + ?Sized>(
    model: &M,
    w: &[Tensor],
    alpha: &[Tensor],
    train: &SourceBatch,
    xi: f64,
) -> Result<Vec<Tensor>> {
    let g = source_loss_grads(model, w, alpha, train, true, false)?;
    axpy_all(w, -xi, &g.w.expect("requested"))
}

/// `[∇_α L_train(w + ηv, α) − ∇_α L_train(w − ηv, α)] / (2η)`.
pub fn hvp_central_difference<M: SearchModel + ?Sized>(
    model: &M,
    w: &[Tensor],
    alpha: &[Tensor],
    train: &SourceBatch,
    v: &[Tensor],
    eta: f64,
) -> Result<Vec<Tensor>> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta must be positive and finite, got {eta}")));
    }
    let plus = axpy_all(w, eta, v)?;
    let minus = axpy_all(w, -eta, v)?;
    let differs = plus
        .iter()
        .zip(&minus)
        .any(|(a, b)| a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()));
    if !differs {
        return Err(Error::InvalidArgument(format!(
            "eta {eta:e} leaves w+ and w- bitwise equal"
        )));
    }
    let gp = source_loss_grads(model, &plus, alpha, train, false, true)?.alpha.expect("requested");
    let gm = source_loss_grads(model, &minus, alpha, train, false, true)?.alpha.expect("requested");
    gp.iter()
        .zip(&gm)
        .map(|(p, m)| {
            let mut d = p.clone();
            d.axpy(-1.0, m)?;
            Ok(d.scaled(1.0 / (2.0 * eta)))
        })
        .collect()
}

/// The discrepancy at `(w, α)` and its gradient with respect to `α`.
pub fn discrepancy_grad<M: SearchModel + ?Sized>(
    model: &M,
    w: &[Tensor],
    alpha: &[Tensor],
    source: &Tensor,
    target: &Tensor,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let wv: Vec<Var> = w.iter().map(|t| tape.constant(t.clone())).collect();
    let av: Vec<Var> = alpha.iter().map(|t| tape.parameter(t.clone())).collect();
    let d = model.discrepancy(&mut tape, &wv, &av, source, target)?;
    let value = check_finite("discrepancy", tape.value(d).item())?;
    let mut grads = tape.backward(d)?;
    Ok((value, grads.collect(&av)))
}

/// Architecture gradient with its components.
#[derive(Clone, Debug)]
pub struct ArchGradient {
    pub grad: Vec<Tensor>,
    /// `L_val(w′, α)`.
    pub val_loss: f64,
    /// Discrepancy at `(w, α)`; 0 when `λ = 0` (not evaluated).
    pub discrepancy: f64,
    pub eta: Option<f64>,
}

pub fn arch_gradient<M: SearchModel + ?Sized>(
    model: &M,
    w: &[Tensor],
    alpha: &[Tensor],
    batch: &StepBatch,
    cfg: &ArchGradConfig,
) -> Result<ArchGradient> {
    if !(cfg.xi >= 0.0) || !(cfg.lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "xi and lambda must be non-negative, got {} and {}",
            cfg.xi, cfg.lambda
        )));
    }
    let w_prime = if cfg.xi > 0.0 {
        virtual_step(model, w, alpha, &batch.train, cfg.xi)?
    } else {
        w.to_vec()
    };
    let val = source_loss_grads(model, &w_prime, alpha, &batch.val, cfg.xi > 0.0, true)?;
    let mut grad = val.alpha.expect("requested");

    let mut eta_used = None;
    if let Some(v) = val.w {
        let norm = global_norm(&v);
        if norm > 0.0 {
            let eta = cfg.eta.eta(norm);
            let hvp = hvp_central_difference(model, w, alpha, &batch.train, &v, eta)?;
            for (g, h) in grad.iter_mut().zip(&hvp) {
                g.axpy(-cfg.xi, h)?;
            }
            eta_used = Some(eta);
        }
    }

    let mut discrepancy = 0.0;
    if cfg.lambda > 0.0 {
        let (value, dg) = discrepancy_grad(model, w, alpha, &batch.val.x, &batch.target)?;
        for (g, d) in grad.iter_mut().zip(&dg) {
            g.axpy(cfg.lambda, d)?;
        }
        discrepancy = value;
    }
    for g in &grad {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: "architecture gradient".into(),
                value: f64::NAN,
            });
        }
    }
    Ok(ArchGradient {
        grad,
        val_loss: val.loss,
        discrepancy,
        eta: eta_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `L = c · α · w^p` on scalar parameters; the data is ignored.
    struct Scalar {
        power: i32,
        coef: f64,
    }

    impl SearchModel for Scalar {
        fn source_loss(&self, tape: &mut Tape, w: &[Var], alpha: &[Var], _: &SourceBatch) -> Result<Var> {
            let mut acc = alpha[0];
            for _ in 0..self.power {
                acc = tape.mul(acc, w[0])?;
            }
            Ok(tape.scale(acc, self.coef))
        }

        fn discrepancy(&self, tape: &mut Tape, _: &[Var], alpha: &[Var], _: &Tensor, _: &Tensor) -> Result<Var> {
            Ok(tape.scale(alpha[0], 0.0))
        }
    }

    fn empty() -> SourceBatch {
        SourceBatch {
            x: Tensor::zeros(&[1]),
            y: vec![],
        }
    }

    fn s(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    const HALF_QUADRATIC: Scalar = Scalar { power: 2, coef: 0.5 };
    const BILINEAR: Scalar = Scalar { power: 1, coef: 1.0 };

    #[test]
    fn virtual_step_scalar_model() {
        let w = virtual_step(&HALF_QUADRATIC, &s(2.0), &s(1.0), &empty(), 0.1).unwrap();
        assert!((w[0].item() - 1.8).abs() < 1e-15);
        let same = virtual_step(&HALF_QUADRATIC, &s(2.0), &s(1.0), &empty(), 0.0).unwrap();
        assert_eq!(same[0].item(), 2.0);
        let at_opt = virtual_step(&HALF_QUADRATIC, &s(0.0), &s(1.0), &empty(), 0.3).unwrap();
        assert_eq!(at_opt[0].item(), 0.0);
    }

    #[test]
    fn bilinear_hvp_is_exact() {
        for eta in [0.5, 0.125, 2f64.powi(-10), 3.0] {
            for v in [0.25, -1.5, 4.0] {
                let h = hvp_central_difference(&BILINEAR, &s(0.75), &s(-2.0), &empty(), &s(v), eta).unwrap();
                assert_eq!(h[0].item(), v, "eta {eta}, v {v}");
            }
        }
    }

    #[test]
    fn quadratic_hvp_matches_mixed_partial() {
        let h = hvp_central_difference(&HALF_QUADRATIC, &s(3.0), &s(1.0), &empty(), &s(2.0), 1e-3).unwrap();
        assert!((h[0].item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn tiny_eta_rejected() {
        let err = hvp_central_difference(&BILINEAR, &s(1e10), &s(1.0), &empty(), &s(1.0), 1e-30).unwrap_err();
        assert!(err.to_string().contains("bitwise"));
        assert!(hvp_central_difference(&BILINEAR, &s(1.0), &s(1.0), &empty(), &s(1.0), 0.0).is_err());
    }

    #[test]
    fn degenerate_config_is_plain_val_gradient() {
        let batch = StepBatch {
            train: empty(),
            val: empty(),
            target: Tensor::zeros(&[1]),
        };
        let cfg = ArchGradConfig {
            xi: 0.0,
            lambda: 0.0,
            eta: EtaMode::default(),
        };
        let g = arch_gradient(&HALF_QUADRATIC, &s(3.0), &s(1.0), &batch, &cfg).unwrap();
        assert_eq!(g.grad[0].item(), 4.5);
        assert_eq!(g.eta, None);
    }

    #[test]
    fn eta_modes() {
        assert_eq!(EtaMode::AnalyticRatio(0.01).eta(4.0), 0.0025);
        assert_eq!(EtaMode::Fixed(0.5).eta(4.0), 0.5);
    }
}
