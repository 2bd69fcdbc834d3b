//! Versioned binary container for named tensors plus string metadata.
//!
//! Layout (little endian): magic `NASDACKP`, `u32` format version, `u64`
//! epoch, kind string, metadata pairs, tensors (name, rank, dims, `f64`
//! data), then an FNV-1a 64 checksum of everything before it. Strings are a
//! `u32` byte length followed by UTF-8. Writes go to a temporary sibling file
//! that is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::adapt::AdaptState;
use crate::data::{DomainPair, EvalLabels, LabeledSet, Shift, TargetSet};
use crate::error::{Error, Result};
use crate::optim::{AdamState, SgdState};
use crate::params::ParamSet;
use crate::search::SearchState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NASDACKP";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub epoch: u64,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, epoch: u64) -> Self {
        Self {
            kind: kind.into(),
            epoch,
            ..Self::default()
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    /// Adds every tensor of `ts` as `prefix/index`.
    pub fn push_all(&mut self, prefix: &str, ts: &[Tensor]) {
        for (i, t) in ts.iter().enumerate() {
            self.push(format!("{prefix}/{i}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// All tensors `prefix/0 .. prefix/n-1`, in order.
    pub fn get_all(&self, prefix: &str) -> Vec<Tensor> {
        (0..)
            .map_while(|i| self.get(&format!("{prefix}/{i}")).ok().cloned())
            .collect()
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        if bytes.len() < MAGIC.len() + 12 {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_FORMAT_VERSION})"
            )));
        }
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated)".into()));
        }
        let epoch = r.u64()?;
        let kind = r.string()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            meta.insert(k, r.string()?);
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { kind, epoch, meta, tensors })
    }

    /// Atomic write: temporary sibling, fsync, rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes `bytes` to `path` through a temporary file renamed into place, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn restore(set: &ParamSet, ck: &Checkpoint, prefix: &str) -> Result<ParamSet> {
    let ts = ck.get_all(prefix);
    if ts.len() != set.len() {
        return Err(Error::Checkpoint(format!(
            "`{prefix}` has {} tensors, model expects {}",
            ts.len(),
            set.len()
        )));
    }
    set.with_tensors(ts)
}

fn restore_buffers(like: &[Tensor], ck: &Checkpoint, prefix: &str) -> Result<Vec<Tensor>> {
    let ts = ck.get_all(prefix);
    if ts.len() != like.len() || ts.iter().zip(like).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Checkpoint(format!("`{prefix}` does not match the model's shapes")));
    }
    Ok(ts)
}

fn restore_sgd(state: &SgdState, ck: &Checkpoint, prefix: &str) -> Result<SgdState> {
    Ok(SgdState {
        config: state.config,
        momentum: restore_buffers(&state.momentum, ck, prefix)?,
    })
}

pub const SEARCH_KIND: &str = "search";
pub const ADAPT_KIND: &str = "adapt";
pub const HEADS_KIND: &str = "heads";
pub const DATASET_KIND: &str = "dataset";

fn labels_tensor(y: &[usize]) -> Tensor {
    Tensor::new(vec![y.len()], y.iter().map(|&v| v as f64).collect()).expect("flat labels")
}

fn tensor_labels(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Checkpoint(format!("label {v} is not a class index")))
            }
        })
        .collect()
}

impl Checkpoint {
    /// Weights, `α`, and both optimizer states of a search run.
    pub fn from_search(state: &SearchState) -> Self {
        let mut ck = Self::new(SEARCH_KIND, state.epoch as u64);
        ck.push_all("w", state.weights.tensors());
        ck.push_all("alpha", state.alpha.tensors());
        ck.push_all("w.momentum", &state.weight_opt.momentum);
        ck.push_all("alpha.adam1", &state.arch_opt.first);
        ck.push_all("alpha.adam2", &state.arch_opt.second);
        ck.meta.insert("adam_step".into(), state.arch_opt.step.to_string());
        ck
    }

    /// Overwrites `state` (built from the same config) with the stored values.
    pub fn restore_search(&self, state: &mut SearchState) -> Result<()> {
        self.expect_kind(SEARCH_KIND)?;
        let step = self
            .meta("adam_step")?
            .parse()
            .map_err(|_| Error::Checkpoint("adam_step is not an integer".into()))?;
        let restored = SearchState {
            weights: restore(&state.weights, self, "w")?,
            alpha: state.alpha.with_tensors(restore_buffers(state.alpha.tensors(), self, "alpha")?)?,
            weight_opt: restore_sgd(&state.weight_opt, self, "w.momentum")?,
            arch_opt: AdamState {
                config: state.arch_opt.config,
                step,
                first: restore_buffers(&state.arch_opt.first, self, "alpha.adam1")?,
                second: restore_buffers(&state.arch_opt.second, self, "alpha.adam2")?,
            },
            epoch: self.epoch as usize,
        };
        *state = restored;
        Ok(())
    }

    /// Generator, classifier bank and the three step optimizers.
    pub fn from_adapt(state: &AdaptState) -> Self {
        let mut ck = Self::new(ADAPT_KIND, state.epoch as u64);
        ck.push_all("g", state.g.tensors());
        ck.push_all("c", state.c.tensors());
        ck.push_all("step1.g", &state.step1_g.momentum);
        ck.push_all("step1.c", &state.step1_c.momentum);
        ck.push_all("step2.c", &state.step2_c.momentum);
        ck.push_all("step3.g", &state.step3_g.momentum);
        ck.meta.insert("heads".into(), state.bank.heads().to_string());
        ck
    }

    pub fn restore_adapt(&self, state: &mut AdaptState) -> Result<()> {
        self.expect_kind(ADAPT_KIND)?;
        let g = restore(&state.g, self, "g")?;
        let c = restore(&state.c, self, "c")?;
        let s1g = restore_sgd(&state.step1_g, self, "step1.g")?;
        let s1c = restore_sgd(&state.step1_c, self, "step1.c")?;
        let s2c = restore_sgd(&state.step2_c, self, "step2.c")?;
        let s3g = restore_sgd(&state.step3_g, self, "step3.g")?;
        state.g = g;
        state.c = c;
        state.step1_g = s1g;
        state.step1_c = s1c;
        state.step2_c = s2c;
        state.step3_g = s3g;
        state.epoch = self.epoch as usize;
        Ok(())
    }

    /// Flat weight vector of every classifier head, tagged with the epoch.
    pub fn head_snapshot(state: &AdaptState) -> Self {
        let mut ck = Self::new(HEADS_KIND, state.epoch as u64);
        for i in 0..state.bank.heads() {
            let v = state.bank.head_vector(&state.c, i);
            let n = v.len();
            ck.push(format!("head/{i}"), &Tensor::new(vec![n], v).expect("flat vector"));
        }
        ck
    }

    /// Both domains with all labels, for reuse by later runs.
    pub fn from_pair(pair: &DomainPair) -> Self {
        let mut ck = Self::new(DATASET_KIND, 0);
        ck.meta.insert("classes".into(), pair.classes.to_string());
        ck.meta.insert("shift_kind".into(), pair.shift.kind.clone());
        ck.meta.insert("shift_magnitude".into(), pair.shift.magnitude.to_string());
        ck.meta.insert("overlap_warning".into(), pair.overlap_warning.to_string());
        ck.push("source.x", &pair.source.x);
        ck.push("source.y", &labels_tensor(&pair.source.y));
        ck.push("target.x", &pair.target.x);
        ck.push("target.y", &labels_tensor(pair.target.labels.persisted()));
        ck
    }

    /// Rebuilds the pair, sealing the target labels again.
    pub fn to_pair(&self) -> Result<DomainPair> {
        self.expect_kind(DATASET_KIND)?;
        let parse = |k: &str| -> Result<f64> {
            self.meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not a number")))
        };
        let classes = parse("classes")? as usize;
        let pair = DomainPair {
            source: LabeledSet::new(self.get("source.x")?.clone(), tensor_labels(self.get("source.y")?)?, classes)?,
            target: TargetSet {
                x: self.get("target.x")?.clone(),
                labels: EvalLabels::new(tensor_labels(self.get("target.y")?)?),
            },
            classes,
            shift: Shift {
                kind: self.meta("shift_kind")?.into(),
                magnitude: parse("shift_magnitude")?,
            },
            overlap_warning: self.meta("overlap_warning")? == "true",
        };
        pair.validate()?;
        Ok(pair)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("test", 7);
        ck.meta.insert("note".into(), "ünïcode".into());
        ck.push("a", &Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        ck.push("scalar", &Tensor::new(vec![], vec![3.5]).unwrap());
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get("a").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn dataset_round_trip() {
        let pair = crate::data::gen_blob_shift(&crate::data::BlobParams {
            n: 30,
            ..Default::default()
        })
        .unwrap();
        let back = Checkpoint::from_bytes(&Checkpoint::from_pair(&pair).to_bytes()).unwrap().to_pair().unwrap();
        assert_eq!(back, pair);
    }

    #[test]
    fn atomic_save_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        sample().save(&p).unwrap();
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
