use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One metrics row: `(step, domain, split, metric, value)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub domain: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsHistory {
    pub rows: Vec<MetricRow>,
}

impl MetricsHistory {
    pub fn push(&mut self, step: usize, domain: &str, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            step,
            domain: domain.to_string(),
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Values of one `(domain, split, metric)` series in step order.
    pub fn series(&self, domain: &str, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.domain == domain && r.split == split && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricRow>, _>>()
            .map_err(|e| Error::format("metrics history", e))?;
        Ok(Self { rows })
    }

    /// Appends rows to `path`, writing the header only when the file is new
    /// or empty.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::format(path.display().to_string(), e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let mut inner = w.into_inner().map_err(|e| Error::format(path.display().to_string(), e))?;
        inner.flush().map_err(|e| Error::io(path, e))
    }
}
