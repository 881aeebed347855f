//! The `lba` command line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::harness::{self, LBAConfig};
use crate::learners::{read_checkpoint, write_checkpoint};
use crate::proposal::RelevanceMode;
use crate::selection::PolicyKind;
use crate::universe::serialize_scenes;

pub const SEED_ENV: &str = "LBA_SEED";

#[derive(Debug, Parser)]
#[command(name = "lba", about = "Learning-by-asking experiments on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training and evaluation scene pools.
    GenScenes(RunArgs),
    /// Sample the bootstrap set.
    Bootstrap(RunArgs),
    /// Run the asking loop and the offline phase.
    RunLba(RunArgs),
    /// Run the budget-matched ground-truth baseline.
    RunBaseline(RunArgs),
    /// Score a saved model on the configured eval sets.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run a grid of configs with repeats and aggregate.
    Ablate(AblateArgs),
    /// Turn run directories into per-figure CSV tables.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<PolicyKind>,
    #[arg(long, value_parser = parse_relevance)]
    pub relevance: Option<RelevanceMode>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub qtype_cond: Option<bool>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// JSON list of partial configs, or {"base": {...}, "cells": [...]}.
    #[arg(long)]
    pub grid: PathBuf,
    /// Base config the cells are merged onto.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub overrides: Overrides,
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    PolicyKind::from_name(s).ok_or_else(|| format!("unknown policy `{s}`"))
}

fn parse_relevance(s: &str) -> Result<RelevanceMode, String> {
    match s {
        "none" => Ok(RelevanceMode::None),
        "learned" => Ok(RelevanceMode::Learned),
        "perfect" => Ok(RelevanceMode::Perfect),
        _ => Err(format!("unknown relevance mode `{s}`")),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("{SEED_ENV}={s} is not a seed"))?)),
        Err(_) => Ok(None),
    }
}

impl Overrides {
    /// Flags win over the environment, which wins over the file.
    fn apply(&self, cfg: &mut LBAConfig) -> Result<()> {
        if let Some(seed) = self.seed.or(env_seed()?) {
            cfg.seed = seed;
        }
        if let Some(b) = self.budget {
            cfg.budget = b;
        }
        if let Some(p) = self.policy {
            cfg.policy = p;
        }
        if let Some(r) = self.relevance {
            cfg.relevance = r;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if let Some(q) = self.qtype_cond {
            cfg.qtype_conditioning = q;
        }
        Ok(())
    }
}

fn read_value(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Shallow merge of `patch` onto `base`; nested objects are merged recursively.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn config_from(value: Value) -> Result<LBAConfig> {
    let mut full = serde_json::to_value(LBAConfig::default())?;
    merge(&mut full, &value);
    Ok(serde_json::from_value(full)?)
}

fn load_config(run: &RunArgs) -> Result<LBAConfig> {
    let mut cfg = config_from(read_value(&run.config)?)?;
    run.overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

fn start_output(out: &Path, effective: &str) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(out, "effective-config.json", effective)
}

fn run_single(run: &RunArgs, baseline: bool) -> Result<()> {
    let cfg = load_config(run)?;
    start_output(&run.out, &cfg.to_json())?;
    let (tuples, record) = if baseline {
        harness::run_iid_baseline(&cfg)?
    } else {
        harness::run_lba(&cfg)?
    };
    record.write_to(&run.out)?;
    let mut jsonl = String::new();
    for t in &tuples {
        jsonl.push_str(&serde_json::to_string(t)?);
        jsonl.push('\n');
    }
    write(&run.out, "acquired.jsonl", &jsonl)?;
    let mut model = Vec::new();
    write_checkpoint(&record.model, &cfg.hash(), &mut model)?;
    fs::write(run.out.join("model.bin"), model).context("writing model.bin")?;
    let s = &record.summary;
    println!(
        "{}: budget {} accuracy {:.4} (ood {:.4}), {} invalid calls",
        s.kind, s.oracle_calls, s.final_accuracy, s.final_ood_accuracy, s.invalid_calls
    );
    Ok(())
}

fn load_grid(args: &AblateArgs) -> Result<Vec<LBAConfig>> {
    let grid = read_value(&args.grid)?;
    let mut base = match &args.config {
        Some(p) => read_value(p)?,
        None => Value::Object(Default::default()),
    };
    let cells = match grid {
        Value::Array(cells) => cells,
        Value::Object(mut o) => {
            if let Some(b) = o.remove("base") {
                merge(&mut base, &b);
            }
            match o.remove("cells") {
                Some(Value::Array(cells)) => cells,
                _ => bail!("grid object needs a `cells` array"),
            }
        }
        _ => bail!("grid must be a list of configs or an object with `cells`"),
    };
    if cells.is_empty() {
        bail!("grid has no cells");
    }
    cells
        .iter()
        .map(|cell| {
            let mut v = base.clone();
            merge(&mut v, cell);
            let mut cfg = config_from(v)?;
            args.overrides.apply(&mut cfg)?;
            Ok(cfg)
        })
        .collect()
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let grid = load_grid(args)?;
    start_output(&args.out, &serde_json::to_string_pretty(&grid)?)?;
    let report = harness::run_ablation(&grid, args.repeats, args.jobs)?;
    write(&args.out, "report.csv", &report.to_csv())?;
    write(&args.out, "report.json", &serde_json::to_string_pretty(&report)?)?;
    for f in &report.failures {
        eprintln!("cell {} repeat {} failed: {}", f.cell_id, f.repeat, f.error);
    }
    println!("{} rows, {} failed runs", report.rows.len(), report.failures.len());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScenes(run) => {
            let cfg = load_config(&run)?;
            start_output(&run.out, &cfg.to_json())?;
            write(&run.out, "scenes.json", &serialize_scenes(&harness::training_scenes(&cfg)?))?;
            write(&run.out, "eval-scenes.json", &serialize_scenes(&harness::eval_scenes(&cfg)?))?;
        }
        Command::Bootstrap(run) => {
            let cfg = load_config(&run)?;
            start_output(&run.out, &cfg.to_json())?;
            let lab = harness::Lab::new(&cfg)?;
            let tuples = harness::build_bootstrap(&lab, &cfg, &harness::training_scenes(&cfg)?)?;
            let mut jsonl = String::new();
            for t in &tuples {
                jsonl.push_str(&serde_json::to_string(t)?);
                jsonl.push('\n');
            }
            write(&run.out, "bootstrap.jsonl", &jsonl)?;
        }
        Command::RunLba(run) => run_single(&run, false)?,
        Command::RunBaseline(run) => run_single(&run, true)?,
        Command::Evaluate { run, model } => {
            let cfg = load_config(&run)?;
            start_output(&run.out, &cfg.to_json())?;
            let file = fs::File::open(&model).with_context(|| format!("opening {}", model.display()))?;
            let (m, hash) = read_checkpoint(std::io::BufReader::new(file))?;
            let (acc, ood) = harness::evaluate_model(&cfg, &m)?;
            let result = serde_json::json!({ "model": model, "model_config_hash": hash, "accuracy": acc, "ood_accuracy": ood });
            write(&run.out, "evaluation.json", &serde_json::to_string_pretty(&result)?)?;
            println!("accuracy {acc:.4} (ood {ood:.4})");
        }
        Command::Ablate(args) => ablate(&args)?,
        Command::Report { out, runs } => {
            for w in harness::report(&runs, &out)? {
                eprintln!("warning: {w}");
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command.
/// Returns 0 on success, 1 on usage errors and 2 on runtime errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}
