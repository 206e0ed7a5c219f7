//! Experiment matrix execution.
//!
//! A cell is one `(architecture, domain set, strategy, fraction, seed)`
//! combination: build the plan, assemble, initialize, train jointly,
//! evaluate, and emit one row per domain. Cells are independent and run on a
//! worker pool; each cell is single-threaded, so results do not depend on the
//! worker count or on scheduling.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;

use crate::archspec::{total_model_params, ArchitectureSpec, HeadSpec};
use crate::bench::config::{ExperimentConfig, ScalarKind};
use crate::bench::data::DomainDataset;
use crate::bench::evaluate;
use crate::bench::results::{ResultRow, ResultsTable};
use crate::error::{Error, Result};
use crate::mdnet::MultiDomainModel;
use crate::planner::{build_plan, Strategy};
use crate::scalar::Scalar;
use crate::trainer::{initialize, train_joint};

#[derive(Debug, Clone, PartialEq)]
pub struct CellKey {
    pub architecture: String,
    pub domains: Vec<String>,
    pub strategy: Strategy,
    pub fraction: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn domain_set(&self) -> String {
        self.domains.join("+")
    }

    /// File-system friendly label.
    pub fn slug(&self) -> String {
        format!(
            "{}_{}_{}_f{}_s{}",
            self.architecture,
            self.domain_set(),
            self.strategy.as_str(),
            self.fraction,
            self.seed
        )
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] {} fraction={} seed={}",
            self.architecture,
            self.domain_set(),
            self.strategy,
            self.fraction,
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub key: CellKey,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRun {
    pub table: ResultsTable,
    pub failures: Vec<CellFailure>,
    pub cells: usize,
}

impl MatrixRun {
    pub fn failure_summary(&self) -> String {
        let mut out = format!("{} of {} cells failed\n", self.failures.len(), self.cells);
        for f in &self.failures {
            out.push_str(&format!("  {}: {}\n", f.key, f.error));
        }
        out
    }
}

/// Enumerates the cells of `cfg` over `archs`. Deterministic strategies
/// ignore the seed list and run once with seed 0.
pub fn cells(cfg: &ExperimentConfig, archs: &[ArchitectureSpec]) -> Vec<CellKey> {
    let mut out = Vec::new();
    for arch in archs {
        for subset in cfg.subsets() {
            for &strategy in &cfg.strategies {
                for &fraction in &cfg.fractions {
                    let seeds: Vec<u64> = if strategy.is_deterministic() { vec![0] } else { cfg.seeds.clone() };
                    for seed in seeds {
                        out.push(CellKey {
                            architecture: arch.name.clone(),
                            domains: subset.clone(),
                            strategy,
                            fraction,
                            seed,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Validates the config, resolves architectures (relative paths against
/// `base_dir`), loads datasets and runs every cell.
pub fn run_matrix(cfg: &ExperimentConfig, base_dir: Option<&Path>) -> Result<MatrixRun> {
    cfg.validate()?;
    let archs = cfg.resolve_architectures(base_dir)?;
    run_matrix_with(cfg, &archs)
}

/// Runs the matrix over already resolved architectures.
pub fn run_matrix_with(cfg: &ExperimentConfig, archs: &[ArchitectureSpec]) -> Result<MatrixRun> {
    cfg.validate()?;
    for arch in archs {
        arch.validate()?;
    }
    match cfg.scalar {
        ScalarKind::F32 => run_typed::<f32>(cfg, archs),
        ScalarKind::F64 => run_typed::<f64>(cfg, archs),
    }
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, archs: &[ArchitectureSpec]) -> Result<MatrixRun> {
    let datasets: Vec<DomainDataset<T>> = cfg
        .domains
        .iter()
        .map(DomainDataset::load)
        .collect::<Result<_>>()?;
    let keys = cells(cfg, archs);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<(CellKey, Result<Vec<ResultRow>>)> = pool.install(|| {
        keys.par_iter()
            .map(|key| {
                let arch = archs
                    .iter()
                    .find(|a| a.name == key.architecture)
                    .expect("cell architecture comes from the list");
                let out = run_cell(cfg, arch, &datasets, key);
                match &out {
                    Ok(_) => log::info!("cell done: {key}"),
                    Err(e) => log::warn!("cell failed: {key}: {e}"),
                }
                (key.clone(), out)
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (key, outcome) in outcomes {
        match outcome {
            Ok(r) => rows.extend(r),
            Err(e) => failures.push(CellFailure {
                key,
                error: e.to_string(),
            }),
        }
    }
    Ok(MatrixRun {
        table: ResultsTable::new(rows),
        failures,
        cells: keys.len(),
    })
}

/// Trains and evaluates one cell.
pub fn run_cell<T: Scalar>(
    cfg: &ExperimentConfig,
    arch: &ArchitectureSpec,
    datasets: &[DomainDataset<T>],
    key: &CellKey,
) -> Result<Vec<ResultRow>> {
    let subset: Vec<DomainDataset<T>> = key
        .domains
        .iter()
        .map(|id| {
            datasets
                .iter()
                .find(|d| &d.domain_id == id)
                .cloned()
                .ok_or_else(|| Error::UnknownDomain(id.clone()))
        })
        .collect::<Result<_>>()?;
    let plan = build_plan(arch, key.strategy, key.fraction, key.seed)?;
    let heads: Vec<HeadSpec> = subset.iter().map(|d| HeadSpec::new(d.domain_id.clone(), d.num_classes)).collect();
    let params_total = total_model_params(arch, &plan, &heads, heads.len())?;
    let mut model = MultiDomainModel::<T>::assemble(arch, &plan, &heads)?;
    initialize(&mut model, &cfg.init)?;
    let mut trainer = cfg.trainer.clone();
    if let Some(dir) = &trainer.dump_dir {
        trainer.dump_dir = Some(dir.join(key.slug()));
    }
    train_joint(&mut model, &subset, &trainer)?;
    let acc = evaluate(&model, &subset)?;
    Ok(subset
        .iter()
        .map(|d| ResultRow {
            architecture: key.architecture.clone(),
            domain_set: key.domain_set(),
            strategy: key.strategy,
            fraction: key.fraction,
            seed: key.seed,
            domain: d.domain_id.clone(),
            val_accuracy: acc[&d.domain_id],
            params_total,
            params_specific: plan.achieved_params,
        })
        .collect())
}
