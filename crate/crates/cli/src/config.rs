//! Flat `key = value` run configuration with defaults for every key.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Moons,
    Blobs,
    Idx,
    /// A dataset written by `gen-data`.
    File,
}

impl FromStr for DatasetKind {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "moons" => Ok(Self::Moons),
            "blobs" => Ok(Self::Blobs),
            "idx" => Ok(Self::Idx),
            "file" => Ok(Self::File),
            _ => Err(()),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Moons => "moons",
            Self::Blobs => "blobs",
            Self::Idx => "idx",
            Self::File => "file",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EtaKind {
    /// `η = eta / ‖v‖`.
    Ratio,
    /// `η = eta`.
    Fixed,
}

impl FromStr for EtaKind {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "ratio" => Ok(Self::Ratio),
            "fixed" => Ok(Self::Fixed),
            _ => Err(()),
        }
    }
}

impl fmt::Display for EtaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ratio => "ratio",
            Self::Fixed => "fixed",
        })
    }
}

/// Parsing and rendering of one config value.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(f64, usize, u64, bool, String, DatasetKind, EtaKind);

pub struct KeyInfo {
    pub name: &'static str,
    pub kind: &'static str,
    pub help: &'static str,
}

macro_rules! run_config {
    ($($field:ident: $ty:ty = $default:expr, $kind:literal, $help:literal;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        pub const KEYS: &[KeyInfo] = &[$(KeyInfo { name: stringify!($field), kind: $kind, help: $help },)*];

        impl RunConfig {
            /// Sets `key` from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty>::parse_value(value).with_context(|| {
                            format!("key `{key}` expects {}, got `{value}`", $kind)
                        })?;
                    })*
                    _ => bail!("{}", unknown_key_message(key)),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($field) => Some(self.$field.render()),)*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    dataset: DatasetKind = DatasetKind::Moons, "one of moons|blobs|idx|file", "domain pair source";
    n: usize = 512, "an integer", "samples per domain for synthetic data";
    rotation_deg: f64 = 45.0, "a number", "two-moons target rotation in degrees";
    noise: f64 = 0.1, "a number", "two-moons point noise";
    classes: usize = 3, "an integer", "class count K of the blob task";
    mean_shift: f64 = 2.0, "a number", "blob target translation in pixels";
    image_size: usize = 16, "an integer", "side of rendered synthetic images";
    source_images: String = String::new(), "a path", "IDX images of the source domain";
    source_labels: String = String::new(), "a path", "IDX labels of the source domain";
    target_images: String = String::new(), "a path", "IDX images of the target domain";
    target_labels: String = String::new(), "a path", "IDX labels of the target domain";
    data_path: String = String::new(), "a path", "dataset file written by gen-data";
    lambda: f64 = 1.0, "a number", "weight of the MMD term in the architecture gradient";
    xi: f64 = 0.025, "a number", "virtual-step learning rate";
    eta_mode: EtaKind = EtaKind::Ratio, "one of ratio|fixed", "finite-difference step rule";
    eta: f64 = 0.01, "a number", "finite-difference step (ratio numerator or fixed value)";
    alpha_lr: f64 = 3e-3, "a number", "Adam learning rate of the architecture parameters";
    weight_lr: f64 = 0.025, "a number", "search weight learning rate";
    momentum: f64 = 0.9, "a number", "search weight momentum";
    weight_decay: f64 = 3e-4, "a number", "search weight decay";
    grad_clip: f64 = 5.0, "a number", "search weight gradient-norm clip (0 disables)";
    search_epochs: usize = 5, "an integer", "search epochs";
    channels: usize = 8, "an integer", "initial channel count";
    search_layers: usize = 5, "an integer", "cells in the search supernet";
    adapt_layers: usize = 8, "an integer", "cells in the adaptation generator";
    nodes: usize = 4, "an integer", "intermediate nodes per cell";
    batch_size: usize = 64, "an even integer", "batch size m";
    split: f64 = 0.5, "a number", "source train fraction during search";
    heads: usize = 4, "an integer", "classifier count N";
    repeats: usize = 4, "an integer", "generator updates per step-three";
    hidden: usize = 128, "an integer", "hidden width of each classifier head";
    lr_step1: f64 = 0.05, "a number", "learning rate of step one";
    lr_step2: f64 = 0.005, "a number", "learning rate of step two (classifier ascent)";
    lr_step3: f64 = 0.1, "a number", "learning rate of step three (generator descent)";
    adapt_momentum: f64 = 0.5, "a number", "adaptation momentum";
    adapt_weight_decay: f64 = 5e-4, "a number", "adaptation weight decay";
    adapt_grad_clip: f64 = 1.0, "a number", "adaptation gradient-norm clip (0 disables)";
    adapt_epochs: usize = 30, "an integer", "adaptation epochs";
    eval_batch: usize = 256, "an integer", "samples per evaluation forward pass";
    source_only: bool = false, "true or false", "train step one only (control run)";
    sweep_heads: String = "2,3,4,5".into(), "a comma-separated list", "classifier counts of the sweep";
    threads: usize = 1, "an integer", "worker threads of the sweep";
    seed: u64 = 0, "an integer", "seed for data, initialization and batching";
    out_dir: String = "runs/default".into(), "a path", "output directory";
}

fn unknown_key_message(key: &str) -> String {
    match nearest_key(key) {
        Some(k) => format!("unknown config key `{key}` (did you mean `{k}`?)"),
        None => format!("unknown config key `{key}`"),
    }
}

/// The valid key closest to `key` in edit distance, if reasonably close.
pub fn nearest_key(key: &str) -> Option<&'static str> {
    KEYS.iter()
        .map(|k| (strsim::levenshtein(key, k.name), k.name))
        .min()
        .filter(|&(d, name)| d <= name.len().max(key.len()) / 2)
        .map(|(_, name)| name)
}

impl RunConfig {
    /// Applies `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are skipped; a `format_version` line must match.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", i + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                bail!("line {}: duplicate key `{key}`", i + 1);
            }
            seen.push(key);
            if key == "format_version" {
                if value != CONFIG_FORMAT_VERSION.to_string() {
                    bail!("line {}: unsupported config format_version {value}", i + 1);
                }
                continue;
            }
            cfg.set(key, value).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_text(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Every key with its resolved value, in declaration order.
    pub fn to_text(&self) -> String {
        let mut out = format!("format_version = {CONFIG_FORMAT_VERSION}\n");
        for k in KEYS {
            out.push_str(&format!("{} = {}\n", k.name, self.get(k.name).expect("declared key")));
        }
        out
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn sweep_heads(&self) -> Result<Vec<usize>> {
        self.sweep_heads
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .with_context(|| format!("sweep_heads entry `{}` is not an integer", s.trim()))
            })
            .collect()
    }
}

/// Command-line flag name of a config key.
pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_text("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.lambda, 1.0);
        assert_eq!(cfg.heads, 4);
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("lambda", "0.25").unwrap();
        cfg.set("dataset", "blobs").unwrap();
        cfg.set("xi", "0.1").unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn misspelled_key_suggests_the_nearest() {
        let err = RunConfig::from_text("lamda=1").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("`lamda`") && msg.contains("`lambda`"), "{msg}");
        assert!(nearest_key("zzzzzzzzzzzzzzzzzzzz").is_none());
    }

    #[test]
    fn type_mismatch_names_the_expected_type() {
        let msg = format!("{:#}", RunConfig::from_text("# header\nheads = four").unwrap_err());
        assert!(msg.contains("line 2") && msg.contains("expects an integer"), "{msg}");
        let msg = format!("{:#}", RunConfig::from_text("dataset = mnist").unwrap_err());
        assert!(msg.contains("moons|blobs|idx|file"), "{msg}");
    }

    #[test]
    fn duplicates_and_versions_are_checked() {
        assert!(RunConfig::from_text("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::from_text("format_version = 9").is_err());
        assert!(RunConfig::from_text("format_version = 1\nseed = 3").is_ok());
    }

    #[test]
    fn sweep_list_parses() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.sweep_heads().unwrap(), vec![2, 3, 4, 5]);
        cfg.sweep_heads = "2, x".into();
        assert!(cfg.sweep_heads().is_err());
    }
}
