//! Experiment harness for nasda: flat configs, run orchestration, JSONL
//! metrics and CSV plot tables behind one `nasda` binary.

pub mod config;
pub mod metrics;
pub mod plots;
pub mod runner;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{flag_name, RunConfig, KEYS};

pub const SUBCOMMANDS: [&str; 7] = ["search", "adapt", "eval", "gen-data", "export-plots", "sweep", "run"];

fn with_config_flags(cmd: Command) -> Command {
    let cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .help("key = value config file"),
        )
        .arg(Arg::new("out").long("out").short('o').value_name("DIR").help("output directory (overrides out_dir)"));
    KEYS.iter().fold(cmd, |cmd, k| {
        cmd.arg(
            Arg::new(k.name)
                .long(flag_name(k.name))
                .value_name("VALUE")
                .help(k.help)
                .allow_hyphen_values(true),
        )
    })
}

/// The full command-line interface.
pub fn cli() -> Command {
    let about = |name: &str| match name {
        "search" => "search a cell on the configured domain pair and write the genotype",
        "adapt" => "adversarial adaptation with the stored genotype",
        "eval" => "re-evaluate the last adaptation checkpoint",
        "gen-data" => "write the configured domain pair to a dataset file",
        "export-plots" => "turn metrics files into CSV tables",
        "sweep" => "adaptation for every classifier count in sweep_heads",
        _ => "search, adapt, eval and export plots in one go",
    };
    let mut root = Command::new("nasda")
        .about("Differentiable cell search with MMD guidance and adversarial classifier-ensemble adaptation")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for name in SUBCOMMANDS {
        let mut sub = with_config_flags(Command::new(name).about(about(name)));
        if name == "export-plots" {
            sub = sub.arg(
                Arg::new("metrics")
                    .value_name("METRICS")
                    .num_args(0..)
                    .action(ArgAction::Append)
                    .help("metrics files (default: every metrics.jsonl under the output directory)"),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

/// Config file, then flag overrides.
pub fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => RunConfig::default(),
    };
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    if let Some(out) = m.get_one::<String>("out") {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_cli<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = cli().try_get_matches_from(args)?;
    let (name, m) = matches.subcommand().expect("subcommand required");
    let cfg = resolve_config(m)?;
    match name {
        "search" => {
            let g = runner::cmd_search(&cfg)?;
            println!("{}", g.to_text());
        }
        "adapt" => print_report(&runner::cmd_adapt(&cfg)?)?,
        "eval" => print_report(&runner::cmd_eval(&cfg)?)?,
        "gen-data" => println!("{}", runner::cmd_gen_data(&cfg)?.display()),
        "export-plots" => {
            let files: Vec<PathBuf> = match m.get_many::<String>("metrics") {
                Some(v) => v.map(PathBuf::from).collect(),
                None => runner::metrics_files(&cfg.out_dir()),
            };
            runner::cmd_export_plots(&files, &cfg.out_dir().join("plots"))?;
        }
        "sweep" => {
            for r in runner::cmd_sweep(&cfg)? {
                println!("N={} source {:.4} target {:.4}", r.heads, r.source_accuracy, r.target_accuracy);
            }
        }
        "run" => print_report(&runner::cmd_run(&cfg)?)?,
        _ => unreachable!("unknown subcommand {name}"),
    }
    Ok(())
}

fn print_report(r: &runner::Report) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(r)?);
    Ok(())
}
