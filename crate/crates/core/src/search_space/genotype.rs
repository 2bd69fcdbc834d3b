//! Discrete cells and their text serialization.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::arch::{edge_count, edge_offset, softmax_row, ArchParams};
use super::ops::{CandidateOpSet, OpKind, OPSET_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GENOTYPE_FORMAT_VERSION: u32 = 1;

/// One retained incoming edge of an intermediate node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    /// 0 and 1 are the cell inputs, `2 + j` is intermediate node `j`.
    pub source: usize,
    pub op: OpKind,
}

/// Two incoming edges for each intermediate node.
pub type CellGenotype = Vec<[Edge; 2]>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Genotype {
    pub opset_version: u32,
    pub ops: CandidateOpSet,
    /// Initial channel width the cell was searched with.
    pub channels: usize,
    /// Number of cells in the searched network.
    pub layers: usize,
    pub normal: CellGenotype,
    pub reduce: CellGenotype,
}

/// Best non-zero op of one edge and its softmax weight. Ties go to the lowest
/// op index.
pub fn edge_choice(logits: &[f64], ops: &CandidateOpSet) -> Option<(OpKind, f64)> {
    let p = softmax_row(logits);
    let mut best: Option<(usize, f64)> = None;
    for (o, (&op, &w)) in ops.ops().iter().zip(&p).enumerate() {
        if op == OpKind::Zero {
            continue;
        }
        if best.is_none_or(|(_, bw)| w > bw) {
            best = Some((o, w));
        }
    }
    best.map(|(o, w)| (ops.ops()[o], w))
}

/// Keeps the two strongest incoming edges of every node, strength being the
/// largest non-zero softmax weight. Ties go to the lowest source node.
pub fn discretize_cell(logits: &Tensor, ops: &CandidateOpSet, nodes: usize) -> Result<CellGenotype> {
    if logits.shape() != [edge_count(nodes), ops.len()] {
        return Err(Error::ShapeMismatch {
            op: "discretize",
            lhs: logits.shape().to_vec(),
            rhs: vec![edge_count(nodes), ops.len()],
        });
    }
    let mut cell = Vec::with_capacity(nodes);
    for j in 0..nodes {
        let mut cands = Vec::with_capacity(2 + j);
        for src in 0..2 + j {
            let (op, w) = edge_choice(logits.row(edge_offset(j) + src), ops)
                .ok_or_else(|| Error::InvalidGenotype("op set has no non-zero operation".into()))?;
            cands.push((src, op, w));
        }
        // Stable sort keeps lower sources first among equal strengths.
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut keep = [cands[0], cands[1]];
        keep.sort_by_key(|c| c.0);
        cell.push(keep.map(|(source, op, _)| Edge { source, op }));
    }
    Ok(cell)
}

impl Genotype {
    pub fn discretize(arch: &ArchParams, ops: &CandidateOpSet, channels: usize, layers: usize) -> Result<Self> {
        let g = Self {
            opset_version: OPSET_VERSION,
            ops: ops.clone(),
            channels,
            layers,
            normal: discretize_cell(arch.normal(), ops, arch.nodes())?,
            reduce: discretize_cell(arch.reduce(), ops, arch.nodes())?,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> usize {
        self.normal.len()
    }

    /// Every edge refers to an earlier node, no edge is `zero`, both cells have
    /// the same node count and all ops belong to the op set.
    pub fn validate(&self) -> Result<()> {
        if self.normal.is_empty() || self.normal.len() != self.reduce.len() {
            return Err(Error::InvalidGenotype(format!(
                "cells have {} and {} nodes",
                self.normal.len(),
                self.reduce.len()
            )));
        }
        for (name, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            for (j, edges) in cell.iter().enumerate() {
                for e in edges {
                    if e.source >= 2 + j {
                        return Err(Error::InvalidGenotype(format!(
                            "{name} node {j}: source {} is not an earlier node",
                            e.source
                        )));
                    }
                    if e.op == OpKind::Zero {
                        return Err(Error::InvalidGenotype(format!("{name} node {j}: zero op retained")));
                    }
                    if self.ops.index_of(e.op).is_none() {
                        return Err(Error::InvalidGenotype(format!(
                            "{name} node {j}: {} is not in the op set",
                            e.op
                        )));
                    }
                }
                if edges[0].source == edges[1].source {
                    return Err(Error::InvalidGenotype(format!("{name} node {j}: duplicate source")));
                }
            }
        }
        Ok(())
    }

    /// Line-oriented `key = value` text. Parsing ignores key order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ops: Vec<&str> = self.ops.ops().iter().map(|o| o.name()).collect();
        writeln!(s, "format_version = {GENOTYPE_FORMAT_VERSION}").unwrap();
        writeln!(s, "opset_version = {}", self.opset_version).unwrap();
        writeln!(s, "opset = {}", ops.join(", ")).unwrap();
        writeln!(s, "channels = {}", self.channels).unwrap();
        writeln!(s, "layers = {}", self.layers).unwrap();
        writeln!(s, "nodes = {}", self.nodes()).unwrap();
        for (name, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            for (j, [a, b]) in cell.iter().enumerate() {
                writeln!(s, "{name}.{j} = {}@{}, {}@{}", a.op, a.source, b.op, b.source).unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields: HashMap<String, (usize, String)> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::GenotypeParse {
                line: line_no,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = k.trim().to_string();
            if fields.insert(key.clone(), (line_no, v.trim().to_string())).is_some() {
                return Err(Error::GenotypeParse {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }

        let mut take = |key: &str| {
            fields.remove(key).ok_or_else(|| Error::GenotypeParse {
                line: 0,
                message: format!("missing key `{key}`"),
            })
        };
        let number = |(line, v): (usize, String), key: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::GenotypeParse {
                line,
                message: format!("`{key}` must be a non-negative integer, found `{v}`"),
            })
        };

        let format = number(take("format_version")?, "format_version")?;
        if format != GENOTYPE_FORMAT_VERSION as usize {
            return Err(Error::GenotypeParse {
                line: 0,
                message: format!("unsupported format_version {format}"),
            });
        }
        let opset_version = number(take("opset_version")?, "opset_version")? as u32;
        let (ops_line, ops_text) = take("opset")?;
        let ops = ops_text
            .split(',')
            .map(|s| s.trim().parse::<OpKind>())
            .collect::<Result<Vec<_>>>()?;
        let ops = CandidateOpSet::new(ops).map_err(|e| Error::GenotypeParse {
            line: ops_line,
            message: e.to_string(),
        })?;
        let channels = number(take("channels")?, "channels")?;
        let layers = number(take("layers")?, "layers")?;
        let nodes = number(take("nodes")?, "nodes")?;

        let mut cell = |name: &str| -> Result<CellGenotype> {
            (0..nodes)
                .map(|j| {
                    let (line, v) = take(&format!("{name}.{j}"))?;
                    parse_node(line, &v)
                })
                .collect()
        };
        let normal = cell("normal")?;
        let reduce = cell("reduce")?;

        if let Some((key, (line, _))) = fields.into_iter().min_by_key(|(_, (l, _))| *l) {
            return Err(Error::GenotypeParse {
                line,
                message: format!("unknown key `{key}`"),
            });
        }
        let g = Self {
            opset_version,
            ops,
            channels,
            layers,
            normal,
            reduce,
        };
        g.validate()?;
        Ok(g)
    }
}

fn parse_node(line: usize, v: &str) -> Result<[Edge; 2]> {
    let parse_edge = |s: &str| -> Result<Edge> {
        let (op, src) = s.trim().split_once('@').ok_or_else(|| Error::GenotypeParse {
            line,
            message: format!("expected `op@source`, found `{}`", s.trim()),
        })?;
        let source = src.trim().parse().map_err(|_| Error::GenotypeParse {
            line,
            message: format!("bad source node `{}`", src.trim()),
        })?;
        Ok(Edge {
            source,
            op: op.trim().parse()?,
        })
    };
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::GenotypeParse {
            line,
            message: format!("expected two edges, found {}", parts.len()),
        });
    }
    Ok([parse_edge(parts[0])?, parse_edge(parts[1])?])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_genotype() -> Genotype {
        Genotype::discretize(&ArchParams::zeros(4, 7), &CandidateOpSet::standard(), 8, 5).unwrap()
    }

    #[test]
    fn uniform_logits_pick_first_op_from_inputs() {
        let g = uniform_genotype();
        for cell in [&g.normal, &g.reduce] {
            for edges in cell {
                assert_eq!(edges[0], Edge { source: 0, op: OpKind::SepConv3x3 });
                assert_eq!(edges[1], Edge { source: 1, op: OpKind::SepConv3x3 });
            }
        }
    }

    #[test]
    fn zero_is_never_chosen() {
        let mut normal = Tensor::zeros(&[14, 7]);
        for e in 0..14 {
            normal.data_mut()[e * 7 + 6] = 50.0;
        }
        let arch = ArchParams::from_tensors(4, normal, Tensor::zeros(&[14, 7]));
        let g = Genotype::discretize(&arch, &CandidateOpSet::standard(), 8, 5).unwrap();
        assert!(g.normal.iter().flatten().all(|e| e.op != OpKind::Zero));
    }

    #[test]
    fn strongest_edges_are_kept() {
        let mut normal = Tensor::zeros(&[14, 7]);
        // Node 3 (offset 9): make sources 3 and 4 dominant.
        normal.data_mut()[(9 + 3) * 7 + 4] = 5.0;
        normal.data_mut()[(9 + 4) * 7 + 5] = 4.0;
        let arch = ArchParams::from_tensors(4, normal, Tensor::zeros(&[14, 7]));
        let g = Genotype::discretize(&arch, &CandidateOpSet::standard(), 8, 5).unwrap();
        assert_eq!(
            g.normal[3],
            [
                Edge { source: 3, op: OpKind::MaxPool3x3 },
                Edge { source: 4, op: OpKind::Identity }
            ]
        );
    }

    #[test]
    fn text_round_trip_and_key_order() {
        let g = uniform_genotype();
        let text = g.to_text();
        assert_eq!(Genotype::from_text(&text).unwrap(), g);
        let mut lines: Vec<&str> = text.lines().collect();
        lines.reverse();
        assert_eq!(Genotype::from_text(&lines.join("\n")).unwrap(), g);
    }

    #[test]
    fn unknown_op_is_named() {
        let text = uniform_genotype().to_text().replacen("sep_conv_3x3@0", "conv_7x7@0", 1);
        let err = Genotype::from_text(&text).unwrap_err();
        assert!(matches!(err, Error::UnknownOp(ref s) if s == "conv_7x7"), "{err}");
    }

    #[test]
    fn parse_errors_carry_line() {
        let text = uniform_genotype().to_text().replace("channels = 8", "channels = eight");
        match Genotype::from_text(&text).unwrap_err() {
            Error::GenotypeParse { line, message } => {
                assert_eq!(line, 4);
                assert!(message.contains("channels"));
            }
            e => panic!("{e}"),
        }
        let text = format!("{}bogus = 1\n", uniform_genotype().to_text());
        assert!(Genotype::from_text(&text).unwrap_err().to_string().contains("bogus"));
    }

    #[test]
    fn invalid_edges_rejected() {
        let mut g = uniform_genotype();
        g.normal[0][1].source = 2;
        assert!(g.validate().is_err());
        let mut g = uniform_genotype();
        g.reduce[1][0].op = OpKind::Zero;
        assert!(g.validate().is_err());
    }
}
