//! Multi-kernel maximum mean discrepancy.
//!
//! A [`KernelBank`] is a convex combination of Gaussian kernels
//! `k(x, y) = Σ_u β_u · exp(−γ_u · ‖x − y‖²)`. Three estimators of the squared
//! MMD between two equally sized samples are provided:
//!
//! * [`EstimatorKind::QuadraticUnbiased`]: the standard U-statistic, used as
//!   the reference everywhere.
//! * [`EstimatorKind::QuadraticPaperLiteral`]: unordered within-domain pairs
//!   over `C(m, 2)` and the cross term over ordered pairs with coefficient
//!   `2 / C(m, 2)`. This weighs the cross term twice as heavily as the
//!   U-statistic and is kept only for comparison.
//! * [`EstimatorKind::LinearTime`]: the average of the `h` statistic over
//!   disjoint consecutive pairs, `O(m)` kernel evaluations. This is the one
//!   differentiated during search ([`mmd2_linear_on_tape`]).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian bandwidths with convex weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    gammas: Vec<f64>,
    betas: Vec<f64>,
}

impl KernelBank {
    /// Requires positive bandwidths and non-negative weights summing to one.
    pub fn new(gammas: Vec<f64>, betas: Vec<f64>) -> Result<Self> {
        if gammas.is_empty() || gammas.len() != betas.len() {
            return Err(Error::InvalidArgument(format!(
                "kernel bank needs equal non-zero counts, got {} bandwidths and {} weights",
                gammas.len(),
                betas.len()
            )));
        }
        if let Some(g) = gammas.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {g}")));
        }
        if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(Error::InvalidArgument(format!("kernel weight must be non-negative, got {b}")));
        }
        let total: f64 = betas.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("kernel weights must sum to 1, got {total}")));
        }
        Ok(Self { gammas, betas })
    }

    pub fn single(gamma: f64) -> Result<Self> {
        Self::new(vec![gamma], vec![1.0])
    }

    /// Equal weights over `gammas`.
    pub fn uniform(gammas: Vec<f64>) -> Result<Self> {
        let n = gammas.len().max(1);
        Self::new(gammas, vec![1.0 / n as f64; n])
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Kernel value at squared distance `d2`.
    pub fn eval_sq_dist(&self, d2: f64) -> f64 {
        self.gammas
            .iter()
            .zip(&self.betas)
            .map(|(g, b)| b * (-g * d2).exp())
            .sum()
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `Σ_u β_u exp(−γ_u ‖x − y‖²)`.
pub fn multi_kernel(x: &[f64], y: &[f64], bank: &KernelBank) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "multi_kernel",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    Ok(bank.eval_sq_dist(sq_dist(x, y)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    QuadraticUnbiased,
    QuadraticPaperLiteral,
    LinearTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    /// Unbiased estimators may be negative.
    pub value: f64,
    pub kind: EstimatorKind,
    pub sample_count: usize,
}

fn check_samples(op: &'static str, xs: &Tensor, xt: &Tensor) -> Result<usize> {
    if xs.ndim() != 2 || xs.shape() != xt.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: xs.shape().to_vec(),
            rhs: xt.shape().to_vec(),
        });
    }
    let m = xs.shape()[0];
    if m < 2 {
        return Err(Error::InvalidArgument(format!("{op} needs at least 2 samples per domain, got {m}")));
    }
    Ok(m)
}

/// Quadratic-time estimator over `m × d` samples from each domain.
pub fn mmd2_quadratic(xs: &Tensor, xt: &Tensor, bank: &KernelBank, kind: EstimatorKind) -> Result<MmdEstimate> {
    let m = check_samples("mmd2_quadratic", xs, xt)?;
    let k = |a: &[f64], b: &[f64]| bank.eval_sq_dist(sq_dist(a, b));
    // Sums run over i < j only; the cross pair term adds k(s_i, t_j) and
    // k(s_j, t_i), so swapping the domains reproduces the value bit for bit.
    let (mut within_s, mut within_t, mut cross) = (0.0, 0.0, 0.0);
    for i in 0..m {
        for j in i + 1..m {
            within_s += k(xs.row(i), xs.row(j));
            within_t += k(xt.row(i), xt.row(j));
            cross += k(xs.row(i), xt.row(j)) + k(xs.row(j), xt.row(i));
        }
    }
    let pairs = (m * (m - 1)) as f64;
    let value = match kind {
        // Ordered sums are twice the unordered ones.
        EstimatorKind::QuadraticUnbiased => (2.0 * within_s + 2.0 * within_t - 2.0 * cross) / pairs,
        EstimatorKind::QuadraticPaperLiteral => {
            let choose2 = pairs / 2.0;
            within_s / choose2 + within_t / choose2 - 2.0 * cross / choose2
        }
        EstimatorKind::LinearTime => return mmd2_linear(xs, xt, bank),
    };
    Ok(MmdEstimate {
        value,
        kind,
        sample_count: m,
    })
}

/// `h((x, y), (x', y')) = k(x, x') + k(y, y') − k(x, y') − k(x', y)`.
fn h_stat(bank: &KernelBank, x: &[f64], xp: &[f64], y: &[f64], yp: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64]| bank.eval_sq_dist(sq_dist(a, b));
    k(x, xp) + k(y, yp) - k(x, yp) - k(xp, y)
}

/// Linear-time estimator `(2/m) Σ_i h(z_{2i−1}, z_{2i})` with `z_i = (xs_i, xt_i)`.
pub fn mmd2_linear(xs: &Tensor, xt: &Tensor, bank: &KernelBank) -> Result<MmdEstimate> {
    let m = check_samples("mmd2_linear", xs, xt)?;
    if m % 2 != 0 {
        return Err(Error::InvalidArgument(format!("linear-time MMD needs an even sample count, got {m}")));
    }
    let total: f64 = (0..m / 2)
        .map(|p| h_stat(bank, xs.row(2 * p), xs.row(2 * p + 1), xt.row(2 * p), xt.row(2 * p + 1)))
        .sum();
    Ok(MmdEstimate {
        value: 2.0 * total / m as f64,
        kind: EstimatorKind::LinearTime,
        sample_count: m,
    })
}

/// Kernel values between matching rows of `a` and `b`, on the tape.
fn kernel_rows(tape: &mut Tape, a: Var, b: Var, bank: &KernelBank) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let d2 = tape.sum_rows(sq)?;
    let mut acc: Option<Var> = None;
    for (&g, &beta) in bank.gammas().iter().zip(bank.betas()) {
        let scaled = tape.scale(d2, -g);
        let e = tape.exp(scaled);
        let term = tape.scale(e, beta);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    Ok(acc.expect("kernel bank is never empty"))
}

/// Differentiable linear-time estimator over `[m, d]` feature nodes.
pub fn mmd2_linear_on_tape(tape: &mut Tape, xs: Var, xt: Var, bank: &KernelBank) -> Result<Var> {
    let (ss, st) = (tape.shape(xs).to_vec(), tape.shape(xt).to_vec());
    if ss.len() != 2 || ss != st {
        return Err(Error::ShapeMismatch {
            op: "mmd2_linear",
            lhs: ss,
            rhs: st,
        });
    }
    let m = ss[0];
    if m < 2 || m % 2 != 0 {
        return Err(Error::InvalidArgument(format!("linear-time MMD needs an even sample count >= 2, got {m}")));
    }
    let first: Vec<usize> = (0..m / 2).map(|p| 2 * p).collect();
    let second: Vec<usize> = (0..m / 2).map(|p| 2 * p + 1).collect();
    let x = tape.gather_rows(xs, &first)?;
    let xp = tape.gather_rows(xs, &second)?;
    let y = tape.gather_rows(xt, &first)?;
    let yp = tape.gather_rows(xt, &second)?;
    let kxx = kernel_rows(tape, x, xp, bank)?;
    let kyy = kernel_rows(tape, y, yp, bank)?;
    let kxy = kernel_rows(tape, x, yp, bank)?;
    let kyx = kernel_rows(tape, xp, y, bank)?;
    let pos = tape.add(kxx, kyy)?;
    let neg = tape.add(kxy, kyx)?;
    let h = tape.sub(pos, neg)?;
    Ok(tape.mean(h))
}

/// Scales of the median-heuristic bank: `γ_u = 1 / (2σ² · 2^u)`.
pub const MEDIAN_BANK_EXPONENTS: [i32; 5] = [-2, -1, 0, 1, 2];

/// Points used for the pairwise-distance median.
pub const MEDIAN_MAX_POINTS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct MedianBank {
    pub bank: KernelBank,
    /// Median pairwise squared distance (or 1 after fallback).
    pub sigma_sq: f64,
    /// Set when every subsampled point coincided and `σ² = 1` was used.
    pub fallback: bool,
}

/// Kernel bank centred on the median pairwise squared distance of the rows
/// of `features`.
pub fn median_heuristic(features: &Tensor) -> Result<MedianBank> {
    if features.ndim() != 2 || features.shape()[0] < 2 {
        return Err(Error::InvalidArgument(format!(
            "median heuristic needs at least 2 row vectors, got shape {:?}",
            features.shape()
        )));
    }
    let n = features.shape()[0];
    let picks: Vec<usize> = if n <= MEDIAN_MAX_POINTS {
        (0..n).collect()
    } else {
        (0..MEDIAN_MAX_POINTS).map(|i| i * n / MEDIAN_MAX_POINTS).collect()
    };
    let mut dists = Vec::with_capacity(picks.len() * (picks.len() - 1) / 2);
    for (a, &i) in picks.iter().enumerate() {
        for &j in &picks[a + 1..] {
            dists.push(sq_dist(features.row(i), features.row(j)));
        }
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    let (sigma_sq, fallback) = if median > 0.0 && median.is_finite() {
        (median, false)
    } else {
        log::warn!("median pairwise distance is {median}; falling back to sigma^2 = 1");
        (1.0, true)
    };
    let gammas = MEDIAN_BANK_EXPONENTS
        .iter()
        .map(|&u| 1.0 / (2.0 * sigma_sq * 2f64.powi(u)))
        .collect();
    Ok(MedianBank {
        bank: KernelBank::uniform(gammas)?,
        sigma_sq,
        fallback,
    })
}
