//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, so the tape is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep that visits each node once.
//! Leaves are either constants or registered parameters; only parameters
//! appear in the returned [`Gradients`].
//!
//! A tape and the [`Var`] handles into it belong to one thread. Build a fresh
//! tape per forward pass.

pub mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Neg(Var),
    Exp(Var),
    Relu(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        n: usize,
        c: usize,
        s: usize,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    LogSoftmax {
        x: Var,
        cols: usize,
    },
    Sum(Var),
    Mean(Var),
    SumRows {
        x: Var,
        cols: usize,
    },
    L1Rows {
        a: Var,
        b: Var,
        cols: usize,
    },
    ConcatChannels {
        inputs: Vec<Var>,
        channels: Vec<usize>,
        n: usize,
        s: usize,
    },
    GlobalAvgPool {
        x: Var,
        s: usize,
    },
    WeightedSum {
        terms: Vec<(Var, usize)>,
        weights: Var,
    },
    Pick {
        x: Var,
        labels: Vec<usize>,
        cols: usize,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
        item: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients of a scalar loss with respect to every registered parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient of `param`, or `None` if `param` was not registered.
    pub fn get(&self, param: Var) -> Option<&Tensor> {
        self.grads.get(&param)
    }

    pub fn take(&mut self, param: Var) -> Option<Tensor> {
        self.grads.remove(&param)
    }

    /// Gradients for `params`, in order. Panics on an unregistered handle.
    pub fn collect(&mut self, params: &[Var]) -> Vec<Tensor> {
        params
            .iter()
            .map(|&p| self.take(p).expect("gradient requested for an unregistered parameter"))
            .collect()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidShape {
        op,
        reason: reason.into(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf and registers it for gradient reporting.
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = inputs.iter().all(|i| self.nodes[i.0].value.is_finite());
            debug_assert!(!inputs_finite, "non-finite output from finite inputs in {op:?}");
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scaled(c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| -v);
        self.push(out, Op::Neg(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                let brow = &tb.data()[p * n..][..n];
                for (o, bv) in out[i * n..][..n].iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Affine layer `x · wᵀ + b` with `x: [rows, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 2 || tw.ndim() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(mismatch("linear", tx, tw));
        }
        let (rows, inp, out_dim) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [out_dim] {
                return Err(mismatch("linear bias", tw, tb));
            }
        }
        let mut out = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let xr = &tx.data()[r * inp..][..inp];
            for o in 0..out_dim {
                let wr = &tw.data()[o * inp..][..inp];
                out[r * out_dim + o] = xr.iter().zip(wr).map(|(a, c)| a * c).sum();
            }
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..rows {
                for o in 0..out_dim {
                    out[r * out_dim + o] += bias[o];
                }
            }
        }
        let out = Tensor::new(vec![rows, out_dim], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out: out_dim,
            },
            &inputs,
        ))
    }

    /// 2-D convolution of an NCHW input with `w: [out, in / groups, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 4 || tw.ndim() != 4 {
            return Err(mismatch("conv2d", tx, tw));
        }
        let (xs, ws) = (tx.shape(), tw.shape());
        if groups == 0
            || stride == 0
            || dilation == 0
            || xs[1] % groups != 0
            || ws[0] % groups != 0
            || ws[1] != xs[1] / groups
        {
            return Err(mismatch("conv2d", tx, tw));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
            dilation,
            groups,
        };
        if geom.height + 2 * padding < dilation * (geom.kernel_h - 1) + 1
            || geom.width + 2 * padding < dilation * (geom.kernel_w - 1) + 1
        {
            return Err(invalid("conv2d", format!("kernel {ws:?} larger than padded input {xs:?}")));
        }
        let data = kernels::conv2d_forward(&geom, tx.data(), tw.data());
        let out = Tensor::new(
            vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()],
            data,
        )?;
        Ok(self.push(out, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Depthwise `k×k` convolution followed by a pointwise `1×1` convolution.
    pub fn separable_conv2d(
        &mut self,
        x: Var,
        depthwise: Var,
        pointwise: Var,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let channels = self.shape(x).get(1).copied().unwrap_or(0);
        let dw = self.conv2d(x, depthwise, stride, padding, dilation, channels.max(1))?;
        self.conv2d(dw, pointwise, 1, 0, 1, 1)
    }

    /// 3×3 max pooling, padding 1.
    pub fn max_pool3(&mut self, x: Var, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 4 || stride == 0 {
            return Err(invalid("max_pool3", format!("expected NCHW input, got {:?}", tx.shape())));
        }
        let s = tx.shape().to_vec();
        let (data, argmax, oh, ow) = kernels::max_pool3_forward(tx.data(), s[0] * s[1], s[2], s[3], stride);
        let out = Tensor::new(vec![s[0], s[1], oh, ow], data)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Batch-statistics normalization per channel (axis 1), with optional affine terms.
    pub fn batch_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() < 2 {
            return Err(invalid("batch_norm", format!("expected [N, C, ...], got {:?}", tx.shape())));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let s: usize = tx.shape()[2..].iter().product();
        for p in [gamma, beta].into_iter().flatten() {
            let tp = self.value(p);
            if tp.shape() != [c] {
                return Err(mismatch("batch_norm affine", tx, tp));
            }
        }
        let (xhat, inv_std) = kernels::batch_norm_forward(tx.data(), n, c, s);
        let mut out = xhat.clone();
        if gamma.is_some() || beta.is_some() {
            let gv = gamma.map(|g| self.value(g).data().to_vec());
            let bv = beta.map(|b| self.value(b).data().to_vec());
            for b in 0..n {
                for ch in 0..c {
                    let scale = gv.as_ref().map_or(1.0, |g| g[ch]);
                    let shift = bv.as_ref().map_or(0.0, |v| v[ch]);
                    for v in &mut out[(b * c + ch) * s..][..s] {
                        *v = *v * scale + shift;
                    }
                }
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                n,
                c,
                s,
            },
            &inputs,
        ))
    }

    fn last_dim(&self, op: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(invalid(op, format!("needs a non-empty last axis, got {:?}", self.shape(x)))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_dim("softmax", x)?;
        let tx = self.value(x);
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax { x, cols }, &[x]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_dim("log_softmax", x)?;
        let tx = self.value(x);
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LogSoftmax { x, cols }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    /// Sum over the last axis: `[rows, cols] → [rows]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_dim("sum_rows", x)?;
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let out = Tensor::from_vec(data);
        Ok(self.push(out, Op::SumRows { x, cols }, &[x]))
    }

    /// Row-wise L1 distance `Σ_c |a[r, c] − b[r, c]|`.
    pub fn l1_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let cols = self.last_dim("l1_rows", a)?;
        let diff = self.zip_same("l1_rows", a, b, |x, y| (x - y).abs())?;
        let out = Tensor::from_vec(diff.data().chunks(cols).map(|r| r.iter().sum()).collect());
        Ok(self.push(out, Op::L1Rows { a, b, cols }, &[a, b]))
    }

    /// Concatenation of NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| invalid("concat_channels", "no inputs"))?;
        let fs = self.shape(first).to_vec();
        if fs.len() < 2 {
            return Err(invalid("concat_channels", format!("expected [N, C, ...], got {fs:?}")));
        }
        let n = fs[0];
        let s: usize = fs[2..].iter().product();
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let sh = self.shape(v);
            if sh.len() != fs.len() || sh[0] != n || sh[2..] != fs[2..] {
                return Err(mismatch("concat_channels", self.value(first), self.value(v)));
            }
            channels.push(sh[1]);
        }
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(n * total * s);
        for b in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[b * c * s..][..c * s]);
            }
        }
        let mut shape = fs.clone();
        shape[1] = total;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
                channels,
                n,
                s,
            },
            inputs,
        ))
    }

    /// `[N, C, H, W] → [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 4 {
            return Err(invalid("global_avg_pool", format!("expected NCHW, got {:?}", tx.shape())));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let s = tx.shape()[2] * tx.shape()[3];
        let data = tx.data().chunks(s).map(|p| p.iter().sum::<f64>() / s as f64).collect();
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool { x, s }, &[x]))
    }

    /// `Σ_t weights[idx_t] · x_t` over same-shaped terms; `weights` is indexed flat.
    pub fn weighted_sum(&mut self, terms: &[(Var, usize)], weights: Var) -> Result<Var> {
        let &(first, _) = terms.first().ok_or_else(|| invalid("weighted_sum", "no terms"))?;
        let wv = self.value(weights).data();
        let mut out = vec![0.0; self.value(first).numel()];
        for &(v, idx) in terms {
            if self.shape(v) != self.shape(first) {
                return Err(mismatch("weighted_sum", self.value(first), self.value(v)));
            }
            let w = *wv.get(idx).ok_or_else(|| {
                invalid("weighted_sum", format!("weight index {idx} out of range {}", wv.len()))
            })?;
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        let out = Tensor::new(self.shape(first).to_vec(), out)?;
        let mut inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        inputs.push(weights);
        Ok(self.push(
            out,
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights,
            },
            &inputs,
        ))
    }

    /// `out[r] = x[r, labels[r]]` for `x: [rows, cols]`.
    pub fn pick(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 || tx.shape()[0] != labels.len() {
            return Err(invalid(
                "pick",
                format!("{} labels for input {:?}", labels.len(), tx.shape()),
            ));
        }
        let cols = tx.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: cols,
            });
        }
        let data = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| tx.data()[r * cols + l])
            .collect();
        let out = Tensor::from_vec(data);
        Ok(self.push(
            out,
            Op::Pick {
                x,
                labels: labels.to_vec(),
                cols,
            },
            &[x],
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        let picked = self.pick(lp, labels)?;
        let mean = self.mean(picked);
        Ok(self.neg(mean))
    }

    /// Leading-axis gather; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() == 0 {
            return Err(invalid("gather_rows", "scalar input"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= tx.shape()[0]) {
            return Err(invalid(
                "gather_rows",
                format!("index {bad} out of range for {:?}", tx.shape()),
            ));
        }
        let item = tx.shape()[1..].iter().product();
        let out = tx.select(indices);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
                item,
            },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every registered parameter gets a
    /// gradient; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut out = HashMap::with_capacity(self.params.len());
        for &p in &self.params {
            let shape = self.shape(p).to_vec();
            let g = match grads[p.0].take() {
                Some(data) => Tensor::new(shape, data)?,
                None => Tensor::zeros(&shape),
            };
            out.insert(p, g);
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        // Accumulates into the gradient slot of `v`, allocating zeros on first touch.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(vb) {
                        *x += y * z;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(va) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::Neg(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x -= y)),
            Op::Exp(a) => {
                let out = node.value.data();
                acc(*a, &mut |ga| {
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * o;
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &vb[p * n..][..n];
                            ga[i * k + p] += g[i * n..][..n].iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = va[i * k + p];
                            for (x, y) in gb[p * n..][..n].iter_mut().zip(&g[i * n..][..n]) {
                                *x += av * y;
                            }
                        }
                    }
                });
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                let (rows, inp, out) = (*rows, *inp, *out);
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        for o in 0..out {
                            let go = g[r * out + o];
                            for (a, c) in gx[r * inp..][..inp].iter_mut().zip(&vw[o * inp..][..inp]) {
                                *a += go * c;
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for r in 0..rows {
                        for o in 0..out {
                            let go = g[r * out + o];
                            for (a, c) in gw[o * inp..][..inp].iter_mut().zip(&vx[r * inp..][..inp]) {
                                *a += go * c;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for r in 0..rows {
                            for (a, c) in gb.iter_mut().zip(&g[r * out..][..out]) {
                                *a += c;
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (gi, gw) = kernels::conv2d_backward(geom, val(*x), val(*w), g, self.wants(*x), self.wants(*w));
                if let Some(gi) = gi {
                    acc(*x, &mut |gx| gx.iter_mut().zip(&gi).for_each(|(a, b)| *a += b));
                }
                if let Some(gw) = gw {
                    acc(*w, &mut |gww| gww.iter_mut().zip(&gw).for_each(|(a, b)| *a += b));
                }
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |gx| {
                for (&src, y) in argmax.iter().zip(g) {
                    gx[src] += y;
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                n,
                c,
                s,
            } => {
                let (n, c, s) = (*n, *c, *s);
                let gamma_v = gamma.map(|gv| val(gv));
                if let Some(beta) = beta {
                    acc(*beta, &mut |gb| {
                        for b in 0..n {
                            for ch in 0..c {
                                gb[ch] += g[(b * c + ch) * s..][..s].iter().sum::<f64>();
                            }
                        }
                    });
                }
                if let Some(gamma) = gamma {
                    acc(*gamma, &mut |gg| {
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * s;
                                gg[ch] += g[off..off + s].iter().zip(&xhat[off..off + s]).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    });
                }
                acc(*x, &mut |gx| {
                    let m = (n * s) as f64;
                    for ch in 0..c {
                        let scale = gamma_v.map_or(1.0, |gv| gv[ch]);
                        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                        for b in 0..n {
                            let off = (b * c + ch) * s;
                            for k in off..off + s {
                                sum_dy += g[k];
                                sum_dy_xhat += g[k] * xhat[k];
                            }
                        }
                        let coef = scale * inv_std[ch] / m;
                        for b in 0..n {
                            let off = (b * c + ch) * s;
                            for k in off..off + s {
                                gx[k] += coef * (m * g[k] - sum_dy - xhat[k] * sum_dy_xhat);
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, cols } => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((gr, yr), gxr) in g.chunks(*cols).zip(y.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, a), b) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += b * (a - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x, cols } => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((gr, yr), gxr) in g.chunks(*cols).zip(y.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, a), b) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += a - b.exp() * total;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let inv = g[0] / self.nodes[x.0].value.numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += inv));
            }
            Op::SumRows { x, cols } => acc(*x, &mut |gx| {
                for (row, y) in gx.chunks_mut(*cols).zip(g) {
                    row.iter_mut().for_each(|v| *v += y);
                }
            }),
            Op::L1Rows { a, b, cols } => {
                let (va, vb) = (val(*a), val(*b));
                let sign = |k: usize| {
                    let d = va[k] - vb[k];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*a, &mut |ga| {
                    for (k, v) in ga.iter_mut().enumerate() {
                        *v += g[k / cols] * sign(k);
                    }
                });
                acc(*b, &mut |gb| {
                    for (k, v) in gb.iter_mut().enumerate() {
                        *v -= g[k / cols] * sign(k);
                    }
                });
            }
            Op::ConcatChannels {
                inputs,
                channels,
                n,
                s,
            } => {
                let total: usize = channels.iter().sum();
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(channels) {
                    let off = offset;
                    acc(v, &mut |gv| {
                        for b in 0..*n {
                            let src = &g[(b * total + off) * s..][..c * s];
                            for (o, y) in gv[b * c * s..][..c * s].iter_mut().zip(src) {
                                *o += y;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::GlobalAvgPool { x, s } => {
                let inv = 1.0 / *s as f64;
                acc(*x, &mut |gx| {
                    for (plane, y) in gx.chunks_mut(*s).zip(g) {
                        plane.iter_mut().for_each(|v| *v += y * inv);
                    }
                });
            }
            Op::WeightedSum { terms, weights } => {
                let wv = val(*weights);
                for &(v, idx) in terms {
                    let w = wv[idx];
                    acc(v, &mut |gv| gv.iter_mut().zip(g).for_each(|(a, b)| *a += w * b));
                }
                acc(*weights, &mut |gw| {
                    for &(v, idx) in terms {
                        gw[idx] += val(v).iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Pick { x, labels, cols } => acc(*x, &mut |gx| {
                for (r, (&l, y)) in labels.iter().zip(g).enumerate() {
                    gx[r * cols + l] += y;
                }
            }),
            Op::GatherRows { x, indices, item } => acc(*x, &mut |gx| {
                for (j, &i) in indices.iter().enumerate() {
                    for (o, y) in gx[i * item..][..*item].iter_mut().zip(&g[j * item..][..*item]) {
                        *o += y;
                    }
                }
            }),
        }
    }
}
