//! Run orchestration: each command reads a resolved config and writes its
//! artifacts under `out_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use nasda::adapt::{evaluate, run_adapt, AdaptConfig, AdaptState, EvalReport};
use nasda::checkpoint::{write_atomic, Checkpoint};
use nasda::data::{
    gen_blob_shift, gen_two_moons_shift, load_idx, resize_bilinear, BatchPlan, BlobParams, DomainPair, EvalLabels,
    LabeledSet, MoonsParams, Shift, TargetSet,
};
use nasda::optim::AdamConfig;
use nasda::search::{run_search, ArchGradConfig, EtaMode, SearchConfig};
use nasda::search_space::{CandidateOpSet, Genotype, NetworkConfig};
use nasda::Tensor;

use crate::config::{DatasetKind, EtaKind, RunConfig};
use crate::metrics::{read_metrics, sort_records, MetricsRecord, MetricsWriter, Phase};
use crate::plots::export_plots;

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.resolved";
pub const GENOTYPE_FILE: &str = "genotype.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const FAILED_FILE: &str = "FAILED";
pub const DATA_FILE: &str = "data.ckpt";
pub const ADAPT_LAST: &str = "adapt_last.ckpt";

/// Final evaluation of an adaptation run. Holds no timing information so
/// identical seeded runs produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub seed: u64,
    pub heads: usize,
    pub epochs: usize,
    pub source_only: bool,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub disagreement: f64,
}

impl Report {
    fn new(cfg: &RunConfig, eval: &EvalReport) -> Self {
        Self {
            format_version: REPORT_FORMAT_VERSION,
            seed: cfg.seed,
            heads: cfg.heads,
            epochs: eval.epoch,
            source_only: cfg.source_only,
            source_accuracy: eval.source_accuracy,
            target_accuracy: eval.target_accuracy,
            disagreement: eval.disagreement,
        }
    }
}

fn ckpt_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join("checkpoints")
}

fn prepare(cfg: &RunConfig) -> Result<MetricsWriter> {
    let out = cfg.out_dir();
    fs::create_dir_all(ckpt_dir(cfg)).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    MetricsWriter::open(&out.join(METRICS_FILE))
}

fn run_id(cfg: &RunConfig) -> String {
    format!("seed{}-n{}", cfg.seed, cfg.heads)
}

fn resize_to(x: Tensor, size: usize) -> Result<Tensor> {
    let s = x.shape();
    if s[2] == size && s[3] == size {
        Ok(x)
    } else {
        Ok(resize_bilinear(&x, size, size)?)
    }
}

fn load_idx_pair(cfg: &RunConfig) -> Result<DomainPair> {
    for (key, v) in [
        ("source_images", &cfg.source_images),
        ("source_labels", &cfg.source_labels),
        ("target_images", &cfg.target_images),
        ("target_labels", &cfg.target_labels),
    ] {
        if v.is_empty() {
            bail!("dataset = idx needs `{key}`");
        }
    }
    let s = load_idx(&cfg.source_images, &cfg.source_labels)?;
    let t = load_idx(&cfg.target_images, &cfg.target_labels)?;
    let classes = s.y.iter().chain(&t.y).max().map_or(0, |m| m + 1);
    Ok(DomainPair {
        source: LabeledSet::new(resize_to(s.x, cfg.image_size)?, s.y, classes)?,
        target: TargetSet {
            x: resize_to(t.x, cfg.image_size)?,
            labels: EvalLabels::new(t.y),
        },
        classes,
        shift: Shift {
            kind: "idx".into(),
            magnitude: 0.0,
        },
        overlap_warning: false,
    })
}

fn load_data_file(path: &Path) -> Result<DomainPair> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(ck.to_pair()?)
}

/// The domain pair described by the config.
pub fn build_pair(cfg: &RunConfig) -> Result<DomainPair> {
    let pair = match cfg.dataset {
        DatasetKind::Moons => gen_two_moons_shift(&MoonsParams {
            n: cfg.n,
            rotation_deg: cfg.rotation_deg,
            noise: cfg.noise,
            seed: cfg.seed,
            size: cfg.image_size,
            ..Default::default()
        })?,
        DatasetKind::Blobs => gen_blob_shift(&BlobParams {
            classes: cfg.classes,
            n: cfg.n,
            mean_shift: cfg.mean_shift,
            seed: cfg.seed,
            size: cfg.image_size,
            ..Default::default()
        })?,
        DatasetKind::Idx => load_idx_pair(cfg)?,
        DatasetKind::File => {
            if cfg.data_path.is_empty() {
                bail!("dataset = file needs `data_path`");
            }
            load_data_file(Path::new(&cfg.data_path))?
        }
    };
    pair.validate()?;
    Ok(pair)
}

fn batch_plan(cfg: &RunConfig) -> BatchPlan {
    BatchPlan {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        split: cfg.split,
    }
}

pub fn search_config(cfg: &RunConfig, pair: &DomainPair) -> SearchConfig {
    let mut network = NetworkConfig::new(pair.input_shape()[0], cfg.channels, cfg.search_layers, pair.classes);
    network.nodes = cfg.nodes;
    SearchConfig {
        network,
        grad: ArchGradConfig {
            xi: cfg.xi,
            lambda: cfg.lambda,
            eta: match cfg.eta_mode {
                EtaKind::Ratio => EtaMode::AnalyticRatio(cfg.eta),
                EtaKind::Fixed => EtaMode::Fixed(cfg.eta),
            },
        },
        weight_lr: cfg.weight_lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        grad_clip: (cfg.grad_clip > 0.0).then_some(cfg.grad_clip),
        arch_optimizer: AdamConfig {
            learning_rate: cfg.alpha_lr,
            ..AdamConfig::default()
        },
        epochs: cfg.search_epochs,
        batch: batch_plan(cfg),
        seed: cfg.seed,
    }
}

pub fn adapt_config(cfg: &RunConfig, pair: &DomainPair) -> AdaptConfig {
    let mut network = NetworkConfig::new(pair.input_shape()[0], cfg.channels, cfg.adapt_layers, pair.classes);
    network.nodes = cfg.nodes;
    network.affine = true;
    AdaptConfig {
        network,
        heads: cfg.heads,
        hidden: cfg.hidden,
        repeats: cfg.repeats,
        lr_step1: cfg.lr_step1,
        lr_step2: cfg.lr_step2,
        lr_step3: cfg.lr_step3,
        momentum: cfg.adapt_momentum,
        weight_decay: cfg.adapt_weight_decay,
        grad_clip: (cfg.adapt_grad_clip > 0.0).then_some(cfg.adapt_grad_clip),
        epochs: cfg.adapt_epochs,
        batch: batch_plan(cfg),
        eval_batch: cfg.eval_batch,
        seed: cfg.seed,
        source_only: cfg.source_only,
    }
}

/// Phase I: search, then write the genotype.
pub fn cmd_search(cfg: &RunConfig) -> Result<Genotype> {
    let metrics = prepare(cfg)?;
    let pair = build_pair(cfg)?;
    let scfg = search_config(cfg, &pair);
    let ops = CandidateOpSet::standard();
    let dir = ckpt_dir(cfg);
    let id = run_id(cfg);
    let out = run_search(&scfg, &ops, &pair, &mut |state, m| {
        Checkpoint::from_search(state).save(dir.join(format!("search_epoch_{:03}.ckpt", m.epoch)))?;
        let rec = MetricsRecord::new(&id, Phase::Search, m.epoch, m.epoch * m.steps)
            .with("train_loss", m.train_loss)
            .with("val_loss", m.val_loss)
            .with("mmd", m.mmd)
            .with("alpha_entropy", m.alpha_entropy);
        metrics.append(&rec).map_err(|e| nasda::Error::InvalidArgument(e.to_string()))?;
        log::info!(
            "search epoch {}: train {:.4} val {:.4} mmd {:.4} entropy {:.5}",
            m.epoch,
            m.train_loss,
            m.val_loss,
            m.mmd,
            m.alpha_entropy
        );
        Ok(())
    })?;
    if let Some(abort) = out.abort {
        Checkpoint::from_search(&out.state).save(dir.join("search_last_good.ckpt"))?;
        bail!("search aborted in epoch {}: {}", abort.epoch, abort.message);
    }
    let genotype = out.genotype.expect("completed search has a genotype");
    write_atomic(&cfg.out_dir().join(GENOTYPE_FILE), genotype.to_text().as_bytes())?;
    Ok(genotype)
}

pub fn load_genotype(cfg: &RunConfig) -> Result<Genotype> {
    let path = cfg.out_dir().join(GENOTYPE_FILE);
    if !path.exists() {
        bail!("genotype missing: {} not found (run `search` first)", path.display());
    }
    let g = Genotype::from_text(&fs::read_to_string(&path)?)?;
    g.validate()?;
    Ok(g)
}

fn write_report(cfg: &RunConfig, report: &Report) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    write_atomic(&cfg.out_dir().join(REPORT_FILE), text.as_bytes())?;
    Ok(())
}

fn eval_record(cfg: &RunConfig, eval: &EvalReport) -> MetricsRecord {
    MetricsRecord::new(&run_id(cfg), Phase::Eval, eval.epoch, 0)
        .with("heads", cfg.heads as f64)
        .with("source_acc", eval.source_accuracy)
        .with("target_acc", eval.target_accuracy)
        .with("disagreement", eval.disagreement)
}

/// Phase II on the stored genotype; writes checkpoints, head snapshots and the report.
pub fn cmd_adapt(cfg: &RunConfig) -> Result<Report> {
    let genotype = load_genotype(cfg)?;
    let metrics = prepare(cfg)?;
    let pair = build_pair(cfg)?;
    let acfg = adapt_config(cfg, &pair);
    let dir = ckpt_dir(cfg);
    let heads_dir = cfg.out_dir().join("heads");
    fs::create_dir_all(&heads_dir)?;
    let id = run_id(cfg);
    let out = run_adapt(&acfg, &genotype, &pair, &mut |state, m| {
        Checkpoint::from_adapt(state).save(dir.join(format!("adapt_epoch_{:03}.ckpt", m.epoch)))?;
        Checkpoint::head_snapshot(state).save(heads_dir.join(format!("heads_epoch_{:03}.ckpt", m.epoch)))?;
        let rec = MetricsRecord::new(&id, Phase::Adapt, m.epoch, m.epoch * m.steps)
            .with("ce", m.ce)
            .with("adv_after_step2", m.adv_after_step2)
            .with("adv_after_step3", m.adv_after_step3)
            .with("source_acc", m.eval.source_accuracy)
            .with("target_acc", m.eval.target_accuracy)
            .with("disagreement", m.eval.disagreement);
        metrics.append(&rec).map_err(|e| nasda::Error::InvalidArgument(e.to_string()))?;
        log::info!(
            "adapt epoch {}: ce {:.4} source {:.3} target {:.3}",
            m.epoch,
            m.ce,
            m.eval.source_accuracy,
            m.eval.target_accuracy
        );
        Ok(())
    })?;
    Checkpoint::from_adapt(&out.state).save(dir.join(ADAPT_LAST))?;
    metrics.append(&eval_record(cfg, &out.report))?;
    let report = Report::new(cfg, &out.report);
    write_report(cfg, &report)?;
    Ok(report)
}

/// Re-evaluates the last adaptation checkpoint.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Report> {
    let genotype = load_genotype(cfg)?;
    let pair = build_pair(cfg)?;
    let acfg = adapt_config(cfg, &pair);
    let path = ckpt_dir(cfg).join(ADAPT_LAST);
    if !path.exists() {
        bail!("adaptation checkpoint missing: {} not found (run `adapt` first)", path.display());
    }
    let mut state = AdaptState::init(&acfg, &genotype, pair.classes)?;
    Checkpoint::load(&path)?.restore_adapt(&mut state)?;
    let eval = evaluate(&state, &acfg, &pair)?;
    let report = Report::new(cfg, &eval);
    write_report(cfg, &report)?;
    Ok(report)
}

/// Writes the configured domain pair as a dataset file.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let pair = build_pair(cfg)?;
    if pair.overlap_warning {
        log::warn!("generated classes overlap beyond the separability threshold");
    }
    fs::create_dir_all(cfg.out_dir())?;
    let mut ck = Checkpoint::from_pair(&pair);
    ck.meta.insert("config".into(), cfg.to_text());
    let path = cfg.out_dir().join(DATA_FILE);
    ck.save(&path)?;
    Ok(path)
}

/// Reads every metrics file and writes the plot tables into `dir`.
pub fn cmd_export_plots(files: &[PathBuf], dir: &Path) -> Result<()> {
    let mut records = Vec::new();
    for f in files {
        records.extend(read_metrics(f)?);
    }
    sort_records(&mut records);
    export_plots(&records, dir)
}

pub fn metrics_files(root: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    if root.join(METRICS_FILE).exists() {
        files.push(root.join(METRICS_FILE));
    }
    if let Ok(entries) = fs::read_dir(root) {
        let mut subdirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        subdirs.sort();
        for d in subdirs {
            if d.join(METRICS_FILE).exists() {
                files.push(d.join(METRICS_FILE));
            }
        }
    }
    files
}

/// Adaptation for every head count of `sweep_heads` on the stored genotype,
/// each in its own `heads_N` subdirectory, `threads` at a time.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<Report>> {
    let genotype = load_genotype(cfg)?;
    let counts = cfg.sweep_heads()?;
    let configs: Vec<RunConfig> = counts
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.heads = n;
            c.out_dir = cfg.out_dir().join(format!("heads_{n}")).to_string_lossy().into_owned();
            c
        })
        .collect();
    for c in &configs {
        fs::create_dir_all(c.out_dir())?;
        write_atomic(&c.out_dir().join(GENOTYPE_FILE), genotype.to_text().as_bytes())?;
    }
    let mut reports = Vec::with_capacity(configs.len());
    for chunk in configs.chunks(cfg.threads.max(1)) {
        let results: Vec<Result<Report>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|c| s.spawn(move || cmd_adapt(c))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        });
        for r in results {
            reports.push(r?);
        }
    }
    let root = cfg.out_dir();
    cmd_export_plots(&metrics_files(&root), &root.join("plots"))?;
    Ok(reports)
}

/// search → adapt → eval → plots. A failing phase leaves earlier artifacts in
/// place and writes a `FAILED` marker naming the phase.
pub fn cmd_run(cfg: &RunConfig) -> Result<Report> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    let _ = fs::remove_file(out.join(FAILED_FILE));
    let fail = |phase: &str, e: anyhow::Error| -> anyhow::Error {
        let _ = write_atomic(&out.join(FAILED_FILE), format!("phase: {phase}\nerror: {e:#}\n").as_bytes());
        e.context(format!("{phase} failed"))
    };
    cmd_search(cfg).map_err(|e| fail("search", e))?;
    cmd_adapt(cfg).map_err(|e| fail("adapt", e))?;
    let report = cmd_eval(cfg).map_err(|e| fail("eval", e))?;
    cmd_export_plots(&metrics_files(&out), &out.join("plots")).map_err(|e| fail("export-plots", e))?;
    Ok(report)
}
