//! Datasets, evaluation, the experiment matrix and report generation.

pub mod config;
pub mod data;
pub mod matrix;
pub mod report;
pub mod results;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mdnet::MultiDomainModel;
use crate::scalar::Scalar;

use data::{DomainDataset, SplitKind};

pub use config::{ExperimentConfig, ScalarKind, EXPERIMENT_SCHEMA_VERSION};
pub use matrix::{run_matrix, run_matrix_with, CellFailure, CellKey, MatrixRun};
pub use report::{emit_report, ReportFiles};
pub use results::{ResultRow, ResultsTable};

const EVAL_BATCH: usize = 128;

/// Top-1 accuracy of domain `domain` on one split, BN in frozen-statistics
/// mode.
pub fn accuracy<T: Scalar>(
    model: &MultiDomainModel<T>,
    domain: usize,
    dataset: &DomainDataset<T>,
    kind: SplitKind,
) -> Result<f64> {
    let split = dataset.split(kind);
    if split.is_empty() {
        return Err(Error::EmptySplit {
            domain: dataset.domain_id.clone(),
            split: match kind {
                SplitKind::Train => "train".into(),
                SplitKind::Val => "val".into(),
            },
        });
    }
    let k = model.num_classes(domain);
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = dataset.batch(kind, chunk);
        let logits = model.forward_index(domain, &x)?;
        correct += logits
            .chunks(k)
            .zip(&labels)
            .filter(|(row, &label)| crate::ops::argmax(row) == label)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Validation accuracy of every model domain, keyed by domain id.
pub fn evaluate<T: Scalar>(
    model: &MultiDomainModel<T>,
    datasets: &[DomainDataset<T>],
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (d, id) in model.domain_ids().iter().enumerate() {
        let ds = datasets
            .iter()
            .find(|ds| &ds.domain_id == id)
            .ok_or_else(|| Error::Config(format!("no dataset for domain `{id}`")))?;
        if ds.num_classes != model.num_classes(d) {
            return Err(Error::Config(format!(
                "domain `{id}`: dataset has {} classes, head has {}",
                ds.num_classes,
                model.num_classes(d)
            )));
        }
        out.insert(id.clone(), accuracy(model, d, ds, SplitKind::Val)?);
    }
    Ok(out)
}
