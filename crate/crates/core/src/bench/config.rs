//! Declarative experiment matrix.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archspec::ArchitectureSpec;
use crate::bench::data::DomainSpec;
use crate::error::{Error, Result};
use crate::planner::Strategy;
use crate::seed::sha256_hex;
use crate::trainer::{InitSpec, TrainConfig};

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarKind {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    /// Built-in architecture names or paths to architecture files.
    pub architectures: Vec<String>,
    pub strategies: Vec<Strategy>,
    pub fractions: Vec<f64>,
    /// Plan seeds of the `random` strategy; deterministic strategies run once.
    pub seeds: Vec<u64>,
    pub domains: Vec<DomainSpec>,
    /// Groups of domain ids trained jointly; all domains when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_subsets: Option<Vec<Vec<String>>>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub scalar: ScalarKind,
    #[serde(default)]
    pub trainer: TrainConfig,
    #[serde(default)]
    pub init: InitSpec,
}

fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_value(value)
    }

    /// Builds a config from an already parsed (and possibly overridden)
    /// document, then validates it.
    pub fn from_toml_value(value: toml::Value) -> Result<Self> {
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Digest of the canonical serialization.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_toml_string().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: EXPERIMENT_SCHEMA_VERSION,
            });
        }
        if self.architectures.is_empty() {
            return bad("architectures must not be empty".into());
        }
        if self.strategies.is_empty() {
            return bad("strategies must not be empty".into());
        }
        if self.strategies.iter().collect::<BTreeSet<_>>().len() != self.strategies.len() {
            return bad("strategies contain a duplicate".into());
        }
        if self.fractions.is_empty() {
            return bad("fractions must not be empty".into());
        }
        for &f in &self.fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidFraction(f));
            }
        }
        if self.fractions.iter().map(|f| f.to_bits()).collect::<BTreeSet<_>>().len() != self.fractions.len() {
            return bad("fractions contain a duplicate".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds contain a duplicate".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if self.domains.is_empty() {
            return bad("domains must not be empty".into());
        }
        let ids: BTreeSet<&str> = self.domains.iter().map(|d| d.id.as_str()).collect();
        if ids.len() != self.domains.len() {
            let mut seen = BTreeSet::new();
            let dup = self.domains.iter().find(|d| !seen.insert(&d.id)).expect("a duplicate exists");
            return Err(Error::DuplicateDomain(dup.id.clone()));
        }
        if let Some(subsets) = &self.domain_subsets {
            if subsets.is_empty() {
                return bad("domain_subsets must not be empty when given".into());
            }
            for s in subsets {
                if s.is_empty() {
                    return bad("a domain subset is empty".into());
                }
                let mut seen = BTreeSet::new();
                for id in s {
                    if !ids.contains(id.as_str()) {
                        return Err(Error::UnknownDomain(id.clone()));
                    }
                    if !seen.insert(id) {
                        return Err(Error::DuplicateDomain(id.clone()));
                    }
                }
            }
        }
        self.trainer.validate()
    }

    /// Domain groups in configuration order.
    pub fn subsets(&self) -> Vec<Vec<String>> {
        match &self.domain_subsets {
            Some(s) => s.clone(),
            None => vec![self.domains.iter().map(|d| d.id.clone()).collect()],
        }
    }

    /// Resolves every architecture entry; relative paths are tried against
    /// `base_dir` first.
    pub fn resolve_architectures(&self, base_dir: Option<&Path>) -> Result<Vec<ArchitectureSpec>> {
        self.architectures
            .iter()
            .map(|entry| {
                if let Some(base) = base_dir {
                    let candidate = base.join(entry);
                    if candidate.is_file() {
                        return ArchitectureSpec::load(&candidate);
                    }
                }
                ArchitectureSpec::resolve(entry)
            })
            .collect()
    }
}
