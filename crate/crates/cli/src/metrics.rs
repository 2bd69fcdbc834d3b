//! Line-delimited JSON metrics: one self-contained record per line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const METRICS_FORMAT_VERSION: u32 = 1;

/// Ordered as the phases run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Search,
    Adapt,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub format_version: u32,
    pub run_id: String,
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub scalars: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn new(run_id: &str, phase: Phase, epoch: usize, step: usize) -> Self {
        Self {
            format_version: METRICS_FORMAT_VERSION,
            run_id: run_id.into(),
            phase,
            epoch,
            step,
            scalars: BTreeMap::new(),
        }
    }

    /// Adds a scalar; non-finite values are left out since JSON cannot hold them.
    pub fn with(mut self, key: &str, value: f64) -> Self {
        if value.is_finite() {
            self.scalars.insert(key.into(), value);
        }
        self
    }
}

/// Append-only sink shared by the threads of one run.
pub struct MetricsWriter {
    file: Mutex<File>,
}

impl MetricsWriter {
    /// Opens (creating if needed) for appending, so an unwritable path fails
    /// before any work starts.
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening metrics file {}", path.display()))?;
        Ok(Self { file: Mutex::new(file) })
    }

    /// Writes one record as a single line in one write call.
    pub fn append(&self, record: &MetricsRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut f = self.file.lock().expect("metrics writer poisoned");
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

/// Reads every record. A final line without its newline that does not parse
/// (a write cut short by a crash) is skipped; any other bad line is an error.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).with_context(|| format!("opening metrics file {}", path.display()))?;
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut line = String::new();
    let mut number = 0;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        number += 1;
        let complete = line.ends_with('\n');
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        match serde_json::from_str::<MetricsRecord>(text) {
            Ok(r) if r.format_version == METRICS_FORMAT_VERSION => records.push(r),
            Ok(r) => bail!("{}:{number}: unsupported format_version {}", path.display(), r.format_version),
            Err(_) if !complete => {
                log::warn!("{}:{number}: skipping truncated final record", path.display());
            }
            Err(e) => bail!("{}:{number}: {e}", path.display()),
        }
    }
    Ok(records)
}

/// Stable sort by `(phase, epoch, step)`.
pub fn sort_records(records: &mut [MetricsRecord]) {
    records.sort_by_key(|r| (r.phase, r.epoch, r.step));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(phase: Phase, epoch: usize, step: usize, v: f64) -> MetricsRecord {
        MetricsRecord::new("r", phase, epoch, step).with("loss", v)
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let w = MetricsWriter::open(&p).unwrap();
        let recs = vec![rec(Phase::Search, 1, 4, 0.5), rec(Phase::Search, 2, 8, 0.25), rec(Phase::Adapt, 1, 4, 1.0 / 3.0)];
        for r in &recs {
            w.append(r).unwrap();
        }
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(read_metrics(&p).unwrap(), recs);
    }

    #[test]
    fn truncated_final_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&rec(Phase::Adapt, 1, 1, 2.0)).unwrap();
        std::fs::write(&p, format!("{good}\n{}", &good[..good.len() / 2])).unwrap();
        assert_eq!(read_metrics(&p).unwrap().len(), 1);
        std::fs::write(&p, format!("{}\n{good}\n", &good[..10])).unwrap();
        assert!(read_metrics(&p).is_err());
    }

    #[test]
    fn interleaved_phases_sort_stably() {
        let mut recs = vec![
            rec(Phase::Adapt, 1, 2, 0.0),
            rec(Phase::Search, 2, 1, 1.0),
            rec(Phase::Adapt, 1, 2, 2.0),
            rec(Phase::Search, 1, 9, 3.0),
            rec(Phase::Eval, 0, 0, 4.0),
        ];
        sort_records(&mut recs);
        let order: Vec<f64> = recs.iter().map(|r| r.scalars["loss"]).collect();
        assert_eq!(order, vec![3.0, 1.0, 0.0, 2.0, 4.0]);
    }

    #[test]
    fn non_finite_scalars_are_omitted() {
        let r = MetricsRecord::new("r", Phase::Adapt, 1, 1).with("adv", f64::NAN).with("ce", 1.0);
        assert_eq!(r.scalars.len(), 1);
    }
}
