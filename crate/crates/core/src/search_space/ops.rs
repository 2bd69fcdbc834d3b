//! Candidate operations and their parameterized modules.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::kernels::out_size;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// A candidate operation on a cell edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    Identity,
    Zero,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::MaxPool3x3,
        OpKind::Identity,
        OpKind::Zero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::Identity => "identity",
            OpKind::Zero => "zero",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// Version tag of [`CandidateOpSet::standard`], written into genotype files.
pub const OPSET_VERSION: u32 = 1;

/// Ordered set of candidate operations. Order defines the columns of the
/// architecture logits and is serialized with genotypes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateOpSet {
    ops: Vec<OpKind>,
}

impl CandidateOpSet {
    /// The seven-operation search space.
    pub fn standard() -> Self {
        Self {
            ops: OpKind::ALL.to_vec(),
        }
    }

    /// A custom ordered set. Must be non-empty, duplicate-free and contain `zero`.
    pub fn new(ops: Vec<OpKind>) -> Result<Self> {
        if !ops.contains(&OpKind::Zero) {
            return Err(Error::InvalidArgument("candidate op set must contain `zero`".into()));
        }
        let mut sorted = ops.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != ops.len() {
            return Err(Error::InvalidArgument(format!("duplicate ops in {ops:?}")));
        }
        Ok(Self { ops })
    }

    pub fn ops(&self) -> &[OpKind] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn index_of(&self, op: OpKind) -> Option<usize> {
        self.ops.iter().position(|&o| o == op)
    }
}

impl Default for CandidateOpSet {
    fn default() -> Self {
        Self::standard()
    }
}

/// Allocates initialized parameters into a [`ParamSet`].
pub(crate) struct ParamBuilder<'a, R: Rng> {
    pub params: ParamSet,
    pub rng: &'a mut R,
    pub affine: bool,
}

impl<R: Rng> ParamBuilder<'_, R> {
    /// He-normal initialized convolution weight `[out, in/groups, k, k]`.
    pub fn conv(&mut self, name: String, out: usize, in_per_group: usize, k: usize) -> usize {
        let fan_in = (in_per_group * k * k) as f64;
        let w = Tensor::randn(&[out, in_per_group, k, k], (2.0 / fan_in).sqrt(), self.rng);
        self.params.push(name, w)
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Option<(usize, usize)> {
        self.affine.then(|| {
            let g = self.params.push(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
            let b = self.params.push(format!("{name}.beta"), Tensor::zeros(&[channels]));
            (g, b)
        })
    }

    /// Uniform `±1/√fan_in` linear layer; returns (weight, bias).
    pub fn linear(&mut self, name: &str, inp: usize, out: usize) -> (usize, usize) {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = Tensor::uniform(&[out, inp], bound, self.rng);
        let b = Tensor::uniform(&[out], bound, self.rng);
        (
            self.params.push(format!("{name}.weight"), w),
            self.params.push(format!("{name}.bias"), b),
        )
    }
}

pub(crate) fn apply_bn(tape: &mut Tape, w: &[Var], x: Var, affine: Option<(usize, usize)>) -> Result<Var> {
    match affine {
        Some((g, b)) => tape.batch_norm(x, Some(w[g]), Some(w[b])),
        None => tape.batch_norm(x, None, None),
    }
}

/// ReLU → 1×1 conv (optionally strided) → BN.
#[derive(Clone, Debug)]
pub(crate) struct ReluConvBn {
    conv: usize,
    bn: Option<(usize, usize)>,
    stride: usize,
}

impl ReluConvBn {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        Self {
            conv: pb.conv(format!("{name}.conv"), c_out, c_in, 1),
            bn: pb.batch_norm(&format!("{name}.bn"), c_out),
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, w: &[Var], x: Var) -> Result<Var> {
        let r = tape.relu(x);
        let c = tape.conv2d(r, w[self.conv], self.stride, 0, 1, 1)?;
        apply_bn(tape, w, c, self.bn)
    }
}

/// One depthwise-separable stage: ReLU → depthwise k×k → pointwise → BN.
#[derive(Clone, Debug)]
pub(crate) struct SepStage {
    depthwise: usize,
    pointwise: usize,
    bn: Option<(usize, usize)>,
    stride: usize,
    dilation: usize,
    padding: usize,
}

impl SepStage {
    fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        channels: usize,
        k: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        Self {
            depthwise: pb.conv(format!("{name}.dw"), channels, 1, k),
            pointwise: pb.conv(format!("{name}.pw"), channels, channels, 1),
            bn: pb.batch_norm(&format!("{name}.bn"), channels),
            stride,
            dilation,
            padding: dilation * (k - 1) / 2,
        }
    }

    fn forward(&self, tape: &mut Tape, w: &[Var], x: Var) -> Result<Var> {
        let r = tape.relu(x);
        let c = tape.separable_conv2d(
            r,
            w[self.depthwise],
            w[self.pointwise],
            self.stride,
            self.padding,
            self.dilation,
        )?;
        apply_bn(tape, w, c, self.bn)
    }
}

/// A concrete, parameterized instance of an [`OpKind`] on one edge.
#[derive(Clone, Debug)]
pub(crate) enum OpModule {
    /// Separable convolutions are applied twice; only the first stage strides.
    SepConv([SepStage; 2]),
    DilConv(SepStage),
    MaxPool { stride: usize },
    Identity,
    /// Identity on a strided edge: ReLU → strided 1×1 conv → BN.
    Reduce(ReluConvBn),
    Zero,
}

impl OpModule {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        kind: OpKind,
        channels: usize,
        stride: usize,
    ) -> Self {
        match kind {
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
                OpModule::SepConv([
                    SepStage::new(pb, &format!("{name}.0"), channels, k, stride, 1),
                    SepStage::new(pb, &format!("{name}.1"), channels, k, 1, 1),
                ])
            }
            OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                let k = if kind == OpKind::DilConv3x3 { 3 } else { 5 };
                OpModule::DilConv(SepStage::new(pb, name, channels, k, stride, 2))
            }
            OpKind::MaxPool3x3 => OpModule::MaxPool { stride },
            OpKind::Identity if stride == 1 => OpModule::Identity,
            OpKind::Identity => OpModule::Reduce(ReluConvBn::new(pb, name, channels, channels, stride)),
            OpKind::Zero => OpModule::Zero,
        }
    }

    /// `None` for the zero operation.
    pub fn forward(&self, tape: &mut Tape, w: &[Var], x: Var) -> Result<Option<Var>> {
        Ok(Some(match self {
            OpModule::SepConv([a, b]) => {
                let h = a.forward(tape, w, x)?;
                b.forward(tape, w, h)?
            }
            OpModule::DilConv(s) => s.forward(tape, w, x)?,
            OpModule::MaxPool { stride } => tape.max_pool3(x, *stride)?,
            OpModule::Identity => x,
            OpModule::Reduce(r) => r.forward(tape, w, x)?,
            OpModule::Zero => return Ok(None),
        }))
    }
}

/// Output shape of a (possibly strided) same-padded op on an NCHW input.
pub(crate) fn strided_shape(shape: &[usize], stride: usize) -> Vec<usize> {
    vec![
        shape[0],
        shape[1],
        out_size(shape[2], 1, stride, 0, 1),
        out_size(shape[3], 1, stride, 0, 1),
    ]
}

/// Softmax-weighted sum of every candidate op on one edge.
#[derive(Clone, Debug)]
pub struct MixedOp {
    modules: Vec<(OpKind, OpModule)>,
    stride: usize,
}

impl MixedOp {
    pub(crate) fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        ops: &CandidateOpSet,
        channels: usize,
        stride: usize,
    ) -> Self {
        let modules = ops
            .ops()
            .iter()
            .map(|&k| (k, OpModule::new(pb, &format!("{name}.{}", k.name()), k, channels, stride)))
            .collect();
        Self { modules, stride }
    }

    /// Standalone mixed op over `ops` with freshly initialized parameters.
    pub fn build<R: Rng>(
        ops: &CandidateOpSet,
        channels: usize,
        stride: usize,
        affine: bool,
        rng: &mut R,
    ) -> (Self, ParamSet) {
        let mut pb = ParamBuilder {
            params: ParamSet::new(),
            rng,
            affine,
        };
        let op = Self::new(&mut pb, "mixed", ops, channels, stride);
        (op, pb.params)
    }

    /// `Σ_o weights[offset + o] · o(x)`; `weights` already holds softmax
    /// probabilities for this edge at `offset..offset + |O|`.
    pub fn forward_weighted(&self, tape: &mut Tape, w: &[Var], x: Var, weights: Var, offset: usize) -> Result<Var> {
        let mut terms = Vec::with_capacity(self.modules.len());
        for (o, (_, m)) in self.modules.iter().enumerate() {
            if let Some(y) = m.forward(tape, w, x)? {
                terms.push((y, offset + o));
            }
        }
        if terms.is_empty() {
            let shape = strided_shape(tape.shape(x), self.stride);
            return Ok(tape.constant(Tensor::zeros(&shape)));
        }
        tape.weighted_sum(&terms, weights)
    }

    /// Mixed-op output for raw edge logits `[|O|]`.
    pub fn forward(&self, tape: &mut Tape, w: &[Var], x: Var, edge_logits: Var) -> Result<Var> {
        if tape.value(edge_logits).numel() != self.modules.len() {
            return Err(Error::ShapeMismatch {
                op: "mixed_op",
                lhs: tape.shape(edge_logits).to_vec(),
                rhs: vec![self.modules.len()],
            });
        }
        let weights = tape.softmax(edge_logits)?;
        self.forward_weighted(tape, w, x, weights, 0)
    }
}
