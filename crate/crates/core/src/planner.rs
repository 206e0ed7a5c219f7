//! Sharing plans: which filters of which layers become domain-specific.
//!
//! Every strategy reduces to an enumeration order over `(layer, filter)`
//! pairs followed by the same greedy cut: walk the enumeration, take the
//! next filter only if doing so strictly reduces the distance between the
//! accumulated cost and the target, and stop at the first filter that does
//! not.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archspec::{count_conv_params, ArchitectureSpec};
use crate::error::{Error, Result};
use crate::seed::{rng_for, sha256_hex};

pub const PLAN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Filters nearest the output are domain-specific.
    #[serde(alias = "top-specific")]
    TopSpecific,
    /// Filters nearest the input are domain-specific.
    #[serde(alias = "bottom-specific")]
    BottomSpecific,
    /// Uniformly permuted filters from all layers.
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::TopSpecific, Strategy::Random, Strategy::BottomSpecific];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::TopSpecific => "top_specific",
            Strategy::BottomSpecific => "bottom_specific",
            Strategy::Random => "random",
        }
    }

    /// Hyphenated label used in report tables.
    pub fn display_label(self) -> &'static str {
        match self {
            Strategy::TopSpecific => "top-specific",
            Strategy::BottomSpecific => "bottom-specific",
            Strategy::Random => "random",
        }
    }

    pub fn is_deterministic(self) -> bool {
        self != Strategy::Random
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "top_specific" => Ok(Strategy::TopSpecific),
            "bottom_specific" => Ok(Strategy::BottomSpecific),
            "random" => Ok(Strategy::Random),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingPlan {
    pub schema_version: u32,
    pub arch_name: String,
    pub strategy: Strategy,
    pub fraction: f64,
    /// Permutation seed; always 0 for the deterministic strategies.
    pub seed: u64,
    pub achieved_params: u64,
    #[serde(with = "selection_serde")]
    pub selection: BTreeMap<usize, BTreeSet<usize>>,
}

mod selection_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct LayerSelection {
        layer_id: usize,
        filters: Vec<usize>,
    }

    pub fn serialize<S: Serializer>(sel: &BTreeMap<usize, BTreeSet<usize>>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<LayerSelection> = sel
            .iter()
            .filter(|(_, f)| !f.is_empty())
            .map(|(&layer_id, f)| LayerSelection {
                layer_id,
                filters: f.iter().copied().collect(),
            })
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, BTreeSet<usize>>, D::Error> {
        let rows = Vec::<LayerSelection>::deserialize(d)?;
        let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for row in rows {
            out.entry(row.layer_id).or_default().extend(row.filters);
        }
        Ok(out)
    }
}

impl SharingPlan {
    pub fn is_selected(&self, layer_id: usize, filter: usize) -> bool {
        self.selection.get(&layer_id).is_some_and(|s| s.contains(&filter))
    }

    /// Selected filters of one layer, ascending.
    pub fn selected_in(&self, layer_id: usize) -> impl Iterator<Item = usize> + '_ {
        self.selection.get(&layer_id).into_iter().flatten().copied()
    }

    pub fn num_selected(&self) -> usize {
        self.selection.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_selected() == 0
    }

    pub fn target_params(&self, arch: &ArchitectureSpec) -> f64 {
        self.fraction * count_conv_params(arch) as f64
    }

    /// Structural consistency with `arch`: name, layer ids and filter
    /// indices. Does not recompute `achieved_params`.
    pub fn check_against(&self, arch: &ArchitectureSpec) -> Result<()> {
        if self.arch_name != arch.name {
            return Err(Error::PlanMismatch(format!(
                "plan built for `{}`, architecture is `{}`",
                self.arch_name, arch.name
            )));
        }
        for (&layer_id, filters) in &self.selection {
            let layer = arch
                .layers
                .get(layer_id)
                .ok_or_else(|| Error::PlanMismatch(format!("layer {layer_id} does not exist")))?;
            if let Some(&bad) = filters.iter().find(|&&f| f >= layer.out_channels) {
                return Err(Error::PlanMismatch(format!(
                    "filter {bad} out of range for layer {layer_id} with {} filters",
                    layer.out_channels
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::format("plan file", e))?;
        if plan.schema_version != PLAN_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: plan.schema_version,
                expected: PLAN_SCHEMA_VERSION,
            });
        }
        if !(0.0..=1.0).contains(&plan.fraction) {
            return Err(Error::InvalidFraction(plan.fraction));
        }
        Ok(plan)
    }

    /// Loads a plan and checks it against `arch`, including the stored
    /// parameter count.
    pub fn load(path: &Path, arch: &ArchitectureSpec) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan = Self::from_toml_str(&text)?;
        plan_param_count(&plan, arch)?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Content digest of the canonical text form.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_toml_string().as_bytes())
    }

    /// Achieved vs target line plus one line per layer with a selection.
    pub fn summary(&self, arch: &ArchitectureSpec) -> String {
        let mut out = format!(
            "{} {} fraction {}: achieved {} / target {}\n",
            self.arch_name,
            self.strategy,
            self.fraction,
            self.achieved_params,
            fmt_target(self.target_params(arch))
        );
        for layer in &arch.layers {
            let picked: Vec<usize> = self.selected_in(layer.layer_id).collect();
            if picked.is_empty() {
                continue;
            }
            out.push_str(&format!(
                "  L{}: {}/{} filters {}\n",
                layer.layer_id,
                picked.len(),
                layer.out_channels,
                compress_ranges(&picked)
            ));
        }
        out
    }
}

fn fmt_target(t: f64) -> String {
    let s = format!("{t:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// `[0, 1, 2, 5]` -> `{0-2,5}`.
fn compress_ranges(sorted: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let start = sorted[i];
        let mut end = start;
        while i + 1 < sorted.len() && sorted[i + 1] == end + 1 {
            i += 1;
            end = sorted[i];
        }
        parts.push(if start == end {
            start.to_string()
        } else {
            format!("{start}-{end}")
        });
        i += 1;
    }
    format!("{{{}}}", parts.join(","))
}

/// Order in which a strategy offers filters to the greedy cut.
pub fn enumeration(arch: &ArchitectureSpec, strategy: Strategy, seed: u64) -> Vec<(usize, usize)> {
    let ascending = |layer: &crate::archspec::ConvLayerSpec| {
        let (id, n) = (layer.layer_id, layer.out_channels);
        (0..n).map(move |f| (id, f))
    };
    match strategy {
        Strategy::BottomSpecific => arch.layers.iter().flat_map(ascending).collect(),
        Strategy::TopSpecific => arch.layers.iter().rev().flat_map(ascending).collect(),
        Strategy::Random => {
            let mut all: Vec<_> = arch.layers.iter().flat_map(ascending).collect();
            all.shuffle(&mut rng_for(seed, "planner/random"));
            all
        }
    }
}

pub fn build_plan(arch: &ArchitectureSpec, strategy: Strategy, fraction: f64, seed: u64) -> Result<SharingPlan> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidFraction(fraction));
    }
    if arch.layers.is_empty() {
        return Err(Error::InvalidArchitecture {
            arch: arch.name.clone(),
            reason: "no convolution layers".into(),
        });
    }
    let target = fraction * count_conv_params(arch) as f64;
    let mut achieved = 0u64;
    let mut selection: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (layer_id, filter) in enumeration(arch, strategy, seed) {
        let cost = arch.layers[layer_id].per_filter_params();
        let before = (achieved as f64 - target).abs();
        let after = ((achieved + cost) as f64 - target).abs();
        if after >= before {
            break;
        }
        achieved += cost;
        selection.entry(layer_id).or_default().insert(filter);
    }
    Ok(SharingPlan {
        schema_version: PLAN_SCHEMA_VERSION,
        arch_name: arch.name.clone(),
        strategy,
        fraction,
        seed: if strategy.is_deterministic() { 0 } else { seed },
        achieved_params: achieved,
        selection,
    })
}

/// Recomputes the specific-parameter count of `plan` and checks it against
/// the stored value.
pub fn plan_param_count(plan: &SharingPlan, arch: &ArchitectureSpec) -> Result<u64> {
    plan.check_against(arch)?;
    let recomputed: u64 = plan
        .selection
        .iter()
        .map(|(&l, f)| f.len() as u64 * arch.layers[l].per_filter_params())
        .sum();
    if recomputed != plan.achieved_params {
        return Err(Error::CorruptedPlan {
            stored: plan.achieved_params,
            recomputed,
        });
    }
    Ok(recomputed)
}
