//! Stacked-cell networks: the search supernet and discretized generators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::{edge_count, edge_offset, ArchParams, NORMAL, REDUCE};
use super::genotype::Genotype;
use super::ops::{apply_bn, CandidateOpSet, MixedOp, OpModule, ParamBuilder, ReluConvBn};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Shape of a stacked-cell network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub init_channels: usize,
    pub layers: usize,
    /// Classifier outputs; 0 builds a feature extractor only.
    pub num_classes: usize,
    pub nodes: usize,
    pub stem_multiplier: usize,
    /// Trainable batch-norm scale and shift.
    pub affine: bool,
}

impl NetworkConfig {
    pub fn new(in_channels: usize, init_channels: usize, layers: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            init_channels,
            layers,
            num_classes,
            nodes: 4,
            stem_multiplier: 3,
            affine: false,
        }
    }

    /// Cells at `⌊L/3⌋` and `⌊2L/3⌋` halve resolution and double channels.
    pub fn reduction_layers(&self) -> [usize; 2] {
        [self.layers / 3, 2 * self.layers / 3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 3 {
            return Err(Error::InvalidArgument(format!(
                "need at least 3 layers for two reduction cells, got {}",
                self.layers
            )));
        }
        if self.in_channels == 0 || self.init_channels == 0 || self.nodes == 0 || self.stem_multiplier == 0 {
            return Err(Error::InvalidArgument(format!("degenerate network config {self:?}")));
        }
        Ok(())
    }
}

/// What the cell edges contain.
#[derive(Clone, Copy, Debug)]
pub enum CellSpec<'a> {
    /// Every edge is a mixed op over the set; needs architecture logits at forward time.
    Search(&'a CandidateOpSet),
    /// Fixed edges from a discretized cell.
    Fixed(&'a Genotype),
}

#[derive(Clone, Debug)]
enum Edges {
    Mixed(Vec<MixedOp>),
    Fixed(Vec<[(usize, OpModule); 2]>),
}

/// Output of [`Cell::forward`].
#[derive(Clone, Debug)]
pub struct CellOutput {
    /// Preprocessed inputs followed by every intermediate node.
    pub states: Vec<Var>,
    /// Channel concatenation of the intermediate nodes.
    pub output: Var,
}

/// One cell: two preprocessed inputs, `nodes` intermediate nodes, concat output.
#[derive(Clone, Debug)]
pub struct Cell {
    reduction: bool,
    pre0: ReluConvBn,
    pre1: ReluConvBn,
    nodes: usize,
    edges: Edges,
}

impl Cell {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        spec: CellSpec<'_>,
        nodes: usize,
        c_pp: usize,
        c_p: usize,
        c: usize,
        reduction: bool,
        reduction_prev: bool,
    ) -> Self {
        let pre0 = ReluConvBn::new(pb, &format!("{name}.pre0"), c_pp, c, if reduction_prev { 2 } else { 1 });
        let pre1 = ReluConvBn::new(pb, &format!("{name}.pre1"), c_p, c, 1);
        let stride = |src: usize| if reduction && src < 2 { 2 } else { 1 };
        let edges = match spec {
            CellSpec::Search(ops) => {
                let mut mixed = Vec::with_capacity(edge_count(nodes));
                for j in 0..nodes {
                    for src in 0..2 + j {
                        mixed.push(MixedOp::new(pb, &format!("{name}.edge{j}_{src}"), ops, c, stride(src)));
                    }
                }
                Edges::Mixed(mixed)
            }
            CellSpec::Fixed(g) => {
                let cell = if reduction { &g.reduce } else { &g.normal };
                Edges::Fixed(
                    cell.iter()
                        .enumerate()
                        .map(|(j, pair)| {
                            pair.map(|e| {
                                let n = format!("{name}.edge{j}_{}.{}", e.source, e.op);
                                (e.source, OpModule::new(pb, &n, e.op, c, stride(e.source)))
                            })
                        })
                        .collect(),
                )
            }
        };
        Self {
            reduction,
            pre0,
            pre1,
            nodes,
            edges,
        }
    }

    pub fn is_reduction(&self) -> bool {
        self.reduction
    }

    /// `weights` are the softmax-normalized logits `[edges, |O|]` of this cell
    /// type; required for search cells, ignored for fixed ones.
    pub fn forward(&self, tape: &mut Tape, w: &[Var], s0: Var, s1: Var, weights: Option<Var>) -> Result<CellOutput> {
        let mut states = vec![self.pre0.forward(tape, w, s0)?, self.pre1.forward(tape, w, s1)?];
        for j in 0..self.nodes {
            let mut acc: Option<Var> = None;
            let mut add = |tape: &mut Tape, y: Var| -> Result<()> {
                acc = Some(match acc {
                    Some(a) => tape.add(a, y)?,
                    None => y,
                });
                Ok(())
            };
            match &self.edges {
                Edges::Mixed(mixed) => {
                    let weights = weights
                        .ok_or_else(|| Error::InvalidArgument("search cell needs architecture weights".into()))?;
                    let n_ops = tape.shape(weights)[1];
                    for src in 0..2 + j {
                        let e = edge_offset(j) + src;
                        let y = mixed[e].forward_weighted(tape, w, states[src], weights, e * n_ops)?;
                        add(tape, y)?;
                    }
                }
                Edges::Fixed(fixed) => {
                    for (src, op) in &fixed[j] {
                        let y = op
                            .forward(tape, w, states[*src])?
                            .ok_or_else(|| Error::InvalidGenotype("zero op in a fixed cell".into()))?;
                        add(tape, y)?;
                    }
                }
            }
            states.push(acc.expect("every node has incoming edges"));
        }
        let output = tape.concat_channels(&states[2..])?;
        Ok(CellOutput { states, output })
    }
}

/// Values produced by [`Network::forward`].
#[derive(Clone, Copy, Debug)]
pub struct NetworkOutput {
    /// Globally pooled features `[N, feature_dim]`.
    pub features: Var,
    pub logits: Option<Var>,
}

/// Stem conv, stacked cells, global average pooling and an optional linear
/// classifier. Parameters live in a separate [`ParamSet`] so optimizers and
/// checkpoints can own them.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    search_ops: Option<CandidateOpSet>,
    stem_conv: usize,
    stem_bn: Option<(usize, usize)>,
    cells: Vec<Cell>,
    classifier: Option<(usize, usize)>,
    feature_dim: usize,
}

impl Network {
    pub fn build<R: Rng>(config: &NetworkConfig, spec: CellSpec<'_>, rng: &mut R) -> Result<(Self, ParamSet)> {
        config.validate()?;
        if let CellSpec::Fixed(g) = spec {
            g.validate()?;
            if g.nodes() != config.nodes {
                return Err(Error::InvalidArgument(format!(
                    "genotype has {} nodes, config expects {}",
                    g.nodes(),
                    config.nodes
                )));
            }
        }
        let mut pb = ParamBuilder {
            params: ParamSet::new(),
            rng,
            affine: config.affine,
        };
        let mut c_cur = config.stem_multiplier * config.init_channels;
        let stem_conv = pb.conv("stem.conv".into(), c_cur, config.in_channels, 3);
        let stem_bn = pb.batch_norm("stem.bn", c_cur);

        let (mut c_pp, mut c_p) = (c_cur, c_cur);
        c_cur = config.init_channels;
        let reductions = config.reduction_layers();
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let reduction = reductions.contains(&i);
            if reduction {
                c_cur *= 2;
            }
            cells.push(Cell::new(
                &mut pb,
                &format!("cell{i}"),
                spec,
                config.nodes,
                c_pp,
                c_p,
                c_cur,
                reduction,
                reduction_prev,
            ));
            reduction_prev = reduction;
            c_pp = c_p;
            c_p = config.nodes * c_cur;
        }
        let classifier = (config.num_classes > 0).then(|| pb.linear("classifier", c_p, config.num_classes));
        let search_ops = match spec {
            CellSpec::Search(ops) => Some(ops.clone()),
            CellSpec::Fixed(_) => None,
        };
        Ok((
            Self {
                config: config.clone(),
                search_ops,
                stem_conv,
                stem_bn,
                cells,
                classifier,
                feature_dim: c_p,
            },
            pb.params,
        ))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn is_search(&self) -> bool {
        self.search_ops.is_some()
    }

    /// Fresh architecture logits matching this supernet.
    pub fn init_arch<R: Rng>(&self, rng: &mut R) -> Result<ArchParams> {
        let ops = self
            .search_ops
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("fixed network has no architecture parameters".into()))?;
        Ok(ArchParams::random(self.config.nodes, ops.len(), rng))
    }

    /// `x` is `[N, in_channels, H, W]`; `alpha` the bound `[normal, reduce]`
    /// logits for a search network.
    pub fn forward(&self, tape: &mut Tape, w: &[Var], alpha: Option<&[Var]>, x: Var) -> Result<NetworkOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::InvalidShape {
                op: "network",
                reason: format!("expected [N, {}, H, W], got {shape:?}", self.config.in_channels),
            });
        }
        let weights = match (&self.search_ops, alpha) {
            (Some(ops), Some(a)) => {
                for &v in &a[..2] {
                    if tape.shape(v) != [edge_count(self.config.nodes), ops.len()] {
                        return Err(Error::ShapeMismatch {
                            op: "network",
                            lhs: tape.shape(v).to_vec(),
                            rhs: vec![edge_count(self.config.nodes), ops.len()],
                        });
                    }
                }
                Some([tape.softmax(a[NORMAL])?, tape.softmax(a[REDUCE])?])
            }
            (Some(_), None) => {
                return Err(Error::InvalidArgument("search network needs architecture logits".into()));
            }
            (None, _) => None,
        };

        let stem = tape.conv2d(x, w[self.stem_conv], 1, 1, 1, 1)?;
        let stem = apply_bn(tape, w, stem, self.stem_bn)?;
        let (mut s0, mut s1) = (stem, stem);
        for cell in &self.cells {
            let cw = weights.map(|ws| ws[if cell.reduction { REDUCE } else { NORMAL }]);
            let out = cell.forward(tape, w, s0, s1, cw)?;
            s0 = s1;
            s1 = out.output;
        }
        let features = tape.global_avg_pool(s1)?;
        let logits = match self.classifier {
            Some((cw, cb)) => Some(tape.linear(features, w[cw], Some(w[cb]))?),
            None => None,
        };
        Ok(NetworkOutput { features, logits })
    }
}
