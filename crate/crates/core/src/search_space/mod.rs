//! Cell search space: candidate ops, mixed edges, stacked networks and
//! discretization into a genotype.

mod arch;
mod genotype;
mod network;
mod ops;

pub use arch::{edge_count, edge_offset, softmax_row, ArchParams, NORMAL, REDUCE};
pub use genotype::{discretize_cell, edge_choice, CellGenotype, Edge, Genotype, GENOTYPE_FORMAT_VERSION};
pub use network::{Cell, CellOutput, CellSpec, Network, NetworkConfig, NetworkOutput};
pub use ops::{CandidateOpSet, MixedOp, OpKind, OPSET_VERSION};
