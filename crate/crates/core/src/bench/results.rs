//! The results table: one row per trained `(cell, domain)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::Strategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub architecture: String,
    /// The jointly trained domains, joined with `+`.
    pub domain_set: String,
    pub strategy: Strategy,
    pub fraction: f64,
    /// Plan seed for `random`; `0` for the deterministic strategies.
    pub seed: u64,
    pub domain: String,
    pub val_accuracy: f64,
    pub params_total: u64,
    pub params_specific: u64,
}

impl ResultRow {
    fn sort_key(&self) -> (&str, &str, Strategy, u64, u64, &str) {
        (
            &self.architecture,
            &self.domain_set,
            self.strategy,
            self.fraction.to_bits(),
            self.seed,
            &self.domain,
        )
    }
}

/// Rows sorted by `(architecture, domain_set, strategy, fraction, seed,
/// domain)`, so the table does not depend on execution order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn new(mut rows: Vec<ResultRow>) -> Self {
        rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Self { rows }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if !(0.0..=1.0).contains(&r.val_accuracy) {
                return Err(Error::format("results table", format!("row {i}: accuracy {} outside [0, 1]", r.val_accuracy)));
            }
            if !(0.0..=1.0).contains(&r.fraction) {
                return Err(Error::format("results table", format!("row {i}: fraction {} outside [0, 1]", r.fraction)));
            }
            if r.params_specific > r.params_total {
                return Err(Error::format("results table", format!("row {i}: params_specific exceeds params_total")));
            }
        }
        for w in self.rows.windows(2) {
            if w[0].sort_key() == w[1].sort_key() {
                return Err(Error::format(
                    "results table",
                    format!("duplicate row for domain `{}` of {}", w[1].domain, w[1].architecture),
                ));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }

    /// Parses and validates a table; rows are re-sorted.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ResultRow>, _>>()
            .map_err(|e| Error::format("results table", e))?;
        let table = Self::new(rows);
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(strategy: Strategy, fraction: f64, domain: &str, acc: f64) -> ResultRow {
        ResultRow {
            architecture: "desk_cnn".into(),
            domain_set: "a+b".into(),
            strategy,
            fraction,
            seed: 0,
            domain: domain.into(),
            val_accuracy: acc,
            params_total: 1000,
            params_specific: 10,
        }
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let t = ResultsTable::new(vec![
            row(Strategy::TopSpecific, 0.1 + 0.2, "b", 1.0 / 3.0),
            row(Strategy::BottomSpecific, 0.2, "a", 0.8782),
            row(Strategy::Random, 1.0, "a", 0.0),
        ]);
        let text = t.to_csv();
        assert!(text.starts_with(
            "architecture,domain_set,strategy,fraction,seed,domain,val_accuracy,params_total,params_specific\n"
        ));
        assert_eq!(ResultsTable::from_csv(&text).unwrap(), t);
        assert_eq!(ResultsTable::from_csv(&text).unwrap().to_csv(), text);
    }

    #[test]
    fn order_independent() {
        let rows = vec![
            row(Strategy::TopSpecific, 0.2, "b", 0.5),
            row(Strategy::BottomSpecific, 0.2, "a", 0.6),
            row(Strategy::TopSpecific, 0.0, "a", 0.7),
        ];
        let mut rev = rows.clone();
        rev.reverse();
        assert_eq!(ResultsTable::new(rows).to_csv(), ResultsTable::new(rev).to_csv());
    }

    #[test]
    fn invalid_tables_rejected() {
        let bad = ResultsTable::new(vec![row(Strategy::TopSpecific, 0.2, "a", 1.5)]).to_csv();
        assert!(ResultsTable::from_csv(&bad).is_err());
        let dup = ResultsTable::new(vec![
            row(Strategy::TopSpecific, 0.2, "a", 0.5),
            row(Strategy::TopSpecific, 0.2, "a", 0.5),
        ])
        .to_csv();
        assert!(ResultsTable::from_csv(&dup).is_err());
        assert!(ResultsTable::from_csv("architecture,nonsense\nx,y\n").is_err());
    }
}
