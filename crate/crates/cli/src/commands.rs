//! Subcommand implementations and exit-code classification.

use std::fmt;
use std::path::{Path, PathBuf};

use mdshare::archspec::HeadSpec;
use mdshare::bench::config::ScalarKind;
use mdshare::bench::data::DomainDataset;
use mdshare::bench::matrix::{run_matrix, MatrixRun};
use mdshare::bench::report::{directional_csv, directional_finding, summarize, summary_csv};
use mdshare::mdnet::checkpoint::{load_checkpoint, read_manifest, save_checkpoint};
use mdshare::seed::sha256_hex;
use mdshare::{
    build_plan, emit_report, evaluate, initialize, total_model_params, train_joint, ArchitectureSpec, Error,
    ExperimentConfig, MultiDomainModel, ResultsTable, Scalar, Strategy,
};

use crate::overrides;
use crate::{ConfigArgs, EvalArgs, MatrixArgs, PlanArgs, ReportArgs, TrainArgs};

/// A failed invocation and its exit code class.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, configuration or input files; nothing was computed.
    Validation(String),
    /// Some matrix cells failed; the rest were written.
    Partial(String),
    /// Training, evaluation or output failed.
    Runtime(String),
}

impl Failure {
    pub const VALIDATION: u8 = 1;
    pub const PARTIAL: u8 = 2;
    pub const RUNTIME: u8 = 3;

    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => Self::VALIDATION,
            Failure::Partial(_) => Self::PARTIAL,
            Failure::Runtime(_) => Self::RUNTIME,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Partial(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

/// Errors raised while reading and checking inputs.
fn invalid(e: impl fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

/// Errors raised once computation has started.
fn runtime(e: Error) -> Failure {
    Failure::Runtime(e.to_string())
}

type CmdResult = Result<(), Failure>;

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

/// Reads the config file, applies overrides, then validates.
fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::Validation(format!("{}: {e}", args.config.display())))?;
    let mut doc: toml::Value =
        toml::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", args.config.display())))?;
    for o in &args.overrides {
        overrides::apply(&mut doc, o).map_err(invalid)?;
    }
    ExperimentConfig::from_toml_value(doc).map_err(invalid)
}

fn config_dir(args: &ConfigArgs) -> Option<&Path> {
    args.config.parent().filter(|p| !p.as_os_str().is_empty())
}

fn load_datasets<T: Scalar>(cfg: &ExperimentConfig, ids: &[String]) -> Result<Vec<DomainDataset<T>>, Failure> {
    ids.iter()
        .map(|id| {
            let spec = cfg
                .domains
                .iter()
                .find(|d| &d.id == id)
                .ok_or_else(|| Failure::Validation(format!("domain `{id}` is not configured")))?;
            DomainDataset::load(spec).map_err(invalid)
        })
        .collect()
}

fn file_digest(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn plan(args: &PlanArgs) -> CmdResult {
    let arch = ArchitectureSpec::resolve(&args.arch).map_err(invalid)?;
    arch.validate().map_err(invalid)?;
    let plan = build_plan(&arch, args.strategy, args.fraction, args.seed).map_err(invalid)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    plan.save(&args.out).map_err(runtime)?;
    print!("{}", plan.summary(&arch));
    println!("plan written to {}", args.out.display());
    Ok(())
}

struct TrainCell {
    arch: ArchitectureSpec,
    strategy: Strategy,
    fraction: f64,
    seed: u64,
    domains: Vec<String>,
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let cfg = load_config(&args.config)?;
    let arch = match &args.arch {
        Some(a) => ArchitectureSpec::resolve(a).map_err(invalid)?,
        None => cfg
            .resolve_architectures(config_dir(&args.config))
            .map_err(invalid)?
            .remove(0),
    };
    arch.validate().map_err(invalid)?;
    let strategy = args.strategy.unwrap_or(cfg.strategies[0]);
    let cell = TrainCell {
        strategy,
        fraction: args.fraction.unwrap_or(cfg.fractions[0]),
        seed: if strategy.is_deterministic() { 0 } else { args.seed.unwrap_or(cfg.seeds[0]) },
        domains: cfg.subsets().remove(0),
        arch,
    };
    match cfg.scalar {
        ScalarKind::F32 => train_typed::<f32>(&cfg, &cell, args),
        ScalarKind::F64 => train_typed::<f64>(&cfg, &cell, args),
    }
}

fn train_typed<T: Scalar>(cfg: &ExperimentConfig, cell: &TrainCell, args: &TrainArgs) -> CmdResult {
    let plan = build_plan(&cell.arch, cell.strategy, cell.fraction, cell.seed).map_err(invalid)?;
    let datasets = load_datasets::<T>(cfg, &cell.domains)?;
    let heads: Vec<HeadSpec> = datasets.iter().map(|d| HeadSpec::new(d.domain_id.clone(), d.num_classes)).collect();
    let mut model = MultiDomainModel::<T>::assemble(&cell.arch, &plan, &heads).map_err(invalid)?;
    let params_total = total_model_params(&cell.arch, &plan, &heads, heads.len()).map_err(invalid)?;

    create_dir(&args.out)?;
    initialize(&mut model, &cfg.init).map_err(invalid)?;
    let history = train_joint(&mut model, &datasets, &cfg.trainer).map_err(runtime)?;
    let accuracy = evaluate(&model, &datasets).map_err(runtime)?;

    let metrics = args.out.join("metrics.csv");
    history.append_to(&metrics).map_err(runtime)?;
    plan.save(&args.out.join("plan.toml")).map_err(runtime)?;
    let ckpt = args.out.join("checkpoint");
    save_checkpoint(&model, &ckpt, false).map_err(runtime)?;
    write(&args.out.join("config.toml"), &cfg.to_toml_string())?;

    let mut acc_csv = String::from("domain,val_accuracy\n");
    for (d, a) in &accuracy {
        acc_csv.push_str(&format!("{d},{a}\n"));
    }
    write(&args.out.join("eval.csv"), &acc_csv)?;
    let manifest = serde_json::json!({
        "tool": "mdshare",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "train",
        "config_name": cfg.name,
        "config_digest": cfg.digest(),
        "architecture": cell.arch.name,
        "strategy": cell.strategy.as_str(),
        "fraction": cell.fraction,
        "plan_seed": cell.seed,
        "plan_digest": plan.digest(),
        "achieved_params": plan.achieved_params,
        "params_total": params_total,
        "init_seed": cfg.init.seed,
        "trainer_seed": cfg.trainer.seed,
        "scalar": T::DTYPE,
        "state_digest": model.state_digest(),
    });
    write(
        &args.out.join("run_manifest.json"),
        &(serde_json::to_string_pretty(&manifest).expect("json") + "\n"),
    )?;
    print!("{}", plan.summary(&cell.arch));
    print!("{acc_csv}");
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let cfg = load_config(&args.config)?;
    let manifest = read_manifest(&args.checkpoint).map_err(invalid)?;
    let text = match manifest.dtype.as_str() {
        "F32" => eval_typed::<f32>(&cfg, &args.checkpoint, &manifest.domain_ids)?,
        "F64" => eval_typed::<f64>(&cfg, &args.checkpoint, &manifest.domain_ids)?,
        other => return Err(Failure::Validation(format!("checkpoint has unsupported dtype `{other}`"))),
    };
    if let Some(out) = &args.out {
        write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn eval_typed<T: Scalar>(cfg: &ExperimentConfig, dir: &Path, domains: &[String]) -> Result<String, Failure> {
    let model = load_checkpoint::<T>(dir).map_err(invalid)?;
    let datasets = load_datasets::<T>(cfg, domains)?;
    let accuracy = evaluate(&model, &datasets).map_err(invalid)?;
    let mut text = String::from("domain,val_accuracy\n");
    for (d, a) in &accuracy {
        text.push_str(&format!("{d},{a}\n"));
    }
    Ok(text)
}

pub const RESULTS_FILE: &str = "results.csv";

pub fn matrix(args: &MatrixArgs) -> CmdResult {
    let cfg = load_config(&args.config)?;
    let base = config_dir(&args.config);
    // Resolve everything that can fail on bad input before any training.
    let archs = cfg.resolve_architectures(base).map_err(invalid)?;
    for a in &archs {
        a.validate().map_err(invalid)?;
    }
    create_dir(&args.out)?;
    let run: MatrixRun = run_matrix(&cfg, base).map_err(|e| match e {
        Error::Io { .. } | Error::Diverged { .. } => runtime(e),
        other => invalid(other),
    })?;
    let results = args.out.join(RESULTS_FILE);
    run.table.save(&results).map_err(runtime)?;
    write(&args.out.join("config.toml"), &cfg.to_toml_string())?;
    let mut outputs = serde_json::Map::new();
    outputs.insert(RESULTS_FILE.into(), file_digest(&results)?.into());
    if !run.table.is_empty() {
        let files = emit_report(&run.table, &args.out).map_err(runtime)?;
        let mut paths: Vec<PathBuf> = vec![files.summary, files.directional];
        paths.extend(files.plots);
        for p in paths {
            let rel = p.strip_prefix(&args.out).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            outputs.insert(rel, file_digest(&p)?.into());
        }
    }
    let failures: Vec<serde_json::Value> = run
        .failures
        .iter()
        .map(|f| serde_json::json!({ "cell": f.key.to_string(), "error": f.error }))
        .collect();
    let manifest = serde_json::json!({
        "tool": "mdshare",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "matrix",
        "config_name": cfg.name,
        "config_digest": cfg.digest(),
        "scalar": match cfg.scalar { ScalarKind::F32 => "F32", ScalarKind::F64 => "F64" },
        "plan_seeds": cfg.seeds,
        "init_seed": cfg.init.seed,
        "trainer_seed": cfg.trainer.seed,
        "workers": cfg.workers,
        "cells": run.cells,
        "failed_cells": failures,
        "outputs": outputs,
    });
    write(
        &args.out.join("run_manifest.json"),
        &(serde_json::to_string_pretty(&manifest).expect("json") + "\n"),
    )?;
    println!("{} rows from {} cells written to {}", run.table.len(), run.cells, results.display());
    if !run.table.is_empty() {
        print!("{}", directional_csv(&directional_finding(&run.table)));
    }
    if run.failures.is_empty() {
        Ok(())
    } else {
        write(&args.out.join("failures.txt"), &run.failure_summary())?;
        Err(Failure::Partial(run.failure_summary()))
    }
}

pub fn report(args: &ReportArgs) -> CmdResult {
    let table = ResultsTable::load(&args.results).map_err(invalid)?;
    if table.is_empty() {
        return Err(Failure::Validation(format!("{}: no result rows", args.results.display())));
    }
    create_dir(&args.out)?;
    emit_report(&table, &args.out).map_err(runtime)?;
    print!("{}", summary_csv(&summarize(&table)));
    let gaps = directional_finding(&table);
    if !gaps.is_empty() {
        print!("{}", directional_csv(&gaps));
    }
    Ok(())
}
