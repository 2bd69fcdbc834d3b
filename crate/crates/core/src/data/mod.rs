//! Domain pairs, sealed target labels and seeded batching.

mod idx;
mod synth;

pub use idx::{load_idx, pad_to, read_idx_images, read_idx_labels, resize_bilinear, write_idx_images, write_idx_labels};
pub use synth::{gen_blob_shift, gen_two_moons_shift, render_points, BlobParams, MoonsParams};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[n, c, h, w]` with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.ndim() != 4 {
            return Err(Error::InvalidShape {
                op: "dataset",
                reason: format!("images must be [n, c, h, w], got {:?}", x.shape()),
            });
        }
        if x.len0() != y.len() {
            return Err(Error::CountMismatch {
                images: x.len0(),
                labels: y.len(),
            });
        }
        if let Some(&label) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Target-domain labels, readable only through evaluation methods. Nothing in
/// the training API accepts this type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalLabels(Vec<usize>);

impl EvalLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fraction of `predictions` equal to the held labels.
    pub fn accuracy(&self, predictions: &[usize]) -> Result<f64> {
        if predictions.len() != self.0.len() {
            return Err(Error::CountMismatch {
                images: predictions.len(),
                labels: self.0.len(),
            });
        }
        if self.0.is_empty() {
            return Ok(0.0);
        }
        let hits = predictions.iter().zip(&self.0).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / self.0.len() as f64)
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.0 {
            if y < classes {
                counts[y] += 1;
            }
        }
        counts
    }

    /// Raw labels for the dataset file writer only.
    pub(crate) fn persisted(&self) -> &[usize] {
        &self.0
    }

    /// The same labels in a seeded random order.
    pub fn permuted(&self, seed: u64) -> Self {
        let mut labels = self.0.clone();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self(labels)
    }
}

/// Unlabeled target images with their sealed evaluation labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub x: Tensor,
    pub labels: EvalLabels,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.x.len0()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub kind: String,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source: LabeledSet,
    pub target: TargetSet,
    pub classes: usize,
    pub shift: Shift,
    /// Set when the generator detected poorly separated classes.
    pub overlap_warning: bool,
}

impl DomainPair {
    /// `[c, h, w]` shared by both domains.
    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.source.x.shape();
        [s[1], s[2], s[3]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.x.shape()[1..] != self.target.x.shape()[1..] {
            return Err(Error::ShapeMismatch {
                op: "domain_pair",
                lhs: self.source.x.shape().to_vec(),
                rhs: self.target.x.shape().to_vec(),
            });
        }
        if self.target.len() != self.target.labels.len() {
            return Err(Error::CountMismatch {
                images: self.target.len(),
                labels: self.target.labels.len(),
            });
        }
        let mut source_counts = vec![0usize; self.classes];
        for &y in &self.source.y {
            *source_counts
                .get_mut(y)
                .ok_or(Error::LabelOutOfRange { label: y, classes: self.classes })? += 1;
        }
        let target_counts = self.target.labels.class_counts(self.classes);
        if source_counts.contains(&0) || target_counts.contains(&0) {
            return Err(Error::ClassMismatch(format!(
                "every class must appear in both domains (source {source_counts:?}, target {target_counts:?})"
            )));
        }
        Ok(())
    }
}

/// Batch size, shuffling seed and source train/validation split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub split: f64,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            batch_size: 64,
            seed: 0,
            split: 0.5,
        }
    }
}

impl BatchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "batch size must be even and positive, got {}",
                self.batch_size
            )));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::InvalidArgument(format!("split must lie in (0, 1), got {}", self.split)));
        }
        Ok(())
    }
}

/// Index triple for one search step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchBatch {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub target: Vec<usize>,
}

/// Index pair for one adaptation step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdaptBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SearchEpoch {
    pub batches: Vec<SearchBatch>,
    /// The three streams had different lengths and the longer ones were cut.
    pub truncated: bool,
}

/// Seeded per-epoch batch orders over a domain pair. The source train/val
/// split is fixed for the lifetime of the stream.
#[derive(Clone, Debug)]
pub struct BatchStream {
    plan: BatchPlan,
    train: Vec<usize>,
    val: Vec<usize>,
    n_source: usize,
    n_target: usize,
}

impl BatchStream {
    pub fn new(n_source: usize, n_target: usize, plan: BatchPlan) -> Result<Self> {
        plan.validate()?;
        let mut idx: Vec<usize> = (0..n_source).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));
        let n_train = ((n_source as f64) * plan.split).round() as usize;
        let val = idx.split_off(n_train);
        let stream = Self {
            plan,
            train: idx,
            val,
            n_source,
            n_target,
        };
        let m = plan.batch_size;
        let smallest = stream.train.len().min(stream.val.len()).min(n_target);
        if m > smallest {
            return Err(Error::InvalidArgument(format!(
                "batch size {m} exceeds a split (train {}, val {}, target {n_target})",
                stream.train.len(),
                stream.val.len()
            )));
        }
        Ok(stream)
    }

    pub fn for_pair(pair: &DomainPair, plan: BatchPlan) -> Result<Self> {
        Self::new(pair.source.len(), pair.target.len(), plan)
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }

    pub fn train_batches(&self) -> usize {
        self.train.len() / self.plan.batch_size
    }

    pub fn val_batches(&self) -> usize {
        self.val.len() / self.plan.batch_size
    }

    pub fn target_batches(&self) -> usize {
        self.n_target / self.plan.batch_size
    }

    fn rng(&self, epoch: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.plan.seed);
        rng.set_stream(1 + epoch * 4 + stream);
        rng
    }

    fn chunks(&self, mut items: Vec<usize>, epoch: u64, stream: u64) -> Vec<Vec<usize>> {
        items.shuffle(&mut self.rng(epoch, stream));
        items
            .chunks_exact(self.plan.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn search_epoch(&self, epoch: u64) -> SearchEpoch {
        let train = self.chunks(self.train.clone(), epoch, 0);
        let val = self.chunks(self.val.clone(), epoch, 1);
        let target = self.chunks((0..self.n_target).collect(), epoch, 2);
        let steps = train.len().min(val.len()).min(target.len());
        let truncated = train.len() != steps || val.len() != steps || target.len() != steps;
        let batches = train
            .into_iter()
            .zip(val)
            .zip(target)
            .map(|((train, val), target)| SearchBatch { train, val, target })
            .collect();
        SearchEpoch { batches, truncated }
    }

    /// Batches over the whole source set (train and validation) and the target.
    pub fn adapt_epoch(&self, epoch: u64) -> Vec<AdaptBatch> {
        let source = self.chunks((0..self.n_source).collect(), epoch, 3);
        let target = self.chunks((0..self.n_target).collect(), epoch, 2);
        source
            .into_iter()
            .zip(target)
            .map(|(source, target)| AdaptBatch { source, target })
            .collect()
    }
}

/// Gathers the rows `idx` of a labeled set.
pub fn gather(set: &LabeledSet, idx: &[usize]) -> (Tensor, Vec<usize>) {
    (set.x.select(idx), idx.iter().map(|&i| set.y[i]).collect())
}
