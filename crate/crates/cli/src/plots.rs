//! Tidy CSV tables for downstream plotting.

use std::path::Path;

use anyhow::Result;

use crate::metrics::{MetricsRecord, Phase};

pub const ACCURACY_VS_N: &str = "accuracy_vs_n.csv";
pub const LOSS_VS_EPOCH: &str = "loss_vs_epoch.csv";
pub const ENTROPY_VS_EPOCH: &str = "entropy_vs_epoch.csv";

const LOSS_KEYS: [(Phase, &str); 9] = [
    (Phase::Search, "train_loss"),
    (Phase::Search, "val_loss"),
    (Phase::Search, "mmd"),
    (Phase::Adapt, "ce"),
    (Phase::Adapt, "adv_after_step2"),
    (Phase::Adapt, "adv_after_step3"),
    (Phase::Adapt, "source_acc"),
    (Phase::Adapt, "target_acc"),
    (Phase::Adapt, "disagreement"),
];

/// Shortest text that parses back to the same `f64`.
fn num(v: f64) -> String {
    format!("{v}")
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per final evaluation record carrying a head count: `N, source_acc, target_acc`.
pub fn accuracy_vs_n(records: &[MetricsRecord]) -> Vec<Vec<String>> {
    let mut rows: Vec<(f64, f64, f64)> = records
        .iter()
        .filter(|r| r.phase == Phase::Eval)
        .filter_map(|r| Some((*r.scalars.get("heads")?, *r.scalars.get("source_acc")?, *r.scalars.get("target_acc")?)))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    rows.into_iter().map(|(n, s, t)| vec![num(n), num(s), num(t)]).collect()
}

/// Long format: `run_id, phase, epoch, metric, value`.
pub fn loss_vs_epoch(records: &[MetricsRecord]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in records {
        for (phase, key) in LOSS_KEYS {
            if r.phase == phase {
                if let Some(v) = r.scalars.get(key) {
                    let phase = if phase == Phase::Search { "search" } else { "adapt" };
                    rows.push(vec![r.run_id.clone(), phase.into(), r.epoch.to_string(), key.into(), num(*v)]);
                }
            }
        }
    }
    rows
}

pub fn entropy_vs_epoch(records: &[MetricsRecord]) -> Vec<Vec<String>> {
    records
        .iter()
        .filter(|r| r.phase == Phase::Search)
        .filter_map(|r| Some(vec![r.run_id.clone(), r.epoch.to_string(), num(*r.scalars.get("alpha_entropy")?)]))
        .collect()
}

/// Writes all three tables into `dir`. A table with no usable records is
/// written with its header only and reported.
pub fn export_plots(records: &[MetricsRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let tables: [(&str, &[&str], Vec<Vec<String>>); 3] = [
        (ACCURACY_VS_N, &["N", "source_acc", "target_acc"], accuracy_vs_n(records)),
        (LOSS_VS_EPOCH, &["run_id", "phase", "epoch", "metric", "value"], loss_vs_epoch(records)),
        (ENTROPY_VS_EPOCH, &["run_id", "epoch", "alpha_entropy"], entropy_vs_epoch(records)),
    ];
    for (name, header, rows) in tables {
        if rows.is_empty() && !records.is_empty() {
            log::info!("{name}: no records carry the needed keys; writing header only");
        }
        write_table(&dir.join(name), header, &rows)?;
    }
    Ok(())
}
