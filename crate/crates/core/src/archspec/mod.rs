//! Declarative CNN backbone descriptions and exact parameter accounting.
//!
//! An [`ArchitectureSpec`] is plain data: a chain of convolution layers with
//! the structural glue needed to run them (stride, padding, activation,
//! residual adds), the layers that carry batch normalization, and the width
//! of the classifier input. Nothing here allocates tensors, so plans and
//! budgets can be computed for full-size backbones instantly.

pub mod zoo;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::SharingPlan;

pub const ARCH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Relu6,
    Identity,
}

/// One convolution layer. Each output channel is a filter, the atomic unit
/// of sharing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub layer_id: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default)]
    pub has_bias: bool,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Output of this earlier layer is added after normalization, before
    /// the activation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_from: Option<usize>,
}

fn one() -> usize {
    1
}

impl ConvLayerSpec {
    /// Plain `k×k` convolution with "same" padding, no bias, ReLU.
    pub fn new(layer_id: usize, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            layer_id,
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            groups: 1,
            has_bias: false,
            stride: 1,
            padding: kernel / 2,
            activation: Activation::Relu,
            residual_from: None,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_residual_from(mut self, layer_id: usize) -> Self {
        self.residual_from = Some(layer_id);
        self
    }

    /// Input channels seen by one filter.
    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    /// Weight elements of one filter, bias excluded.
    pub fn filter_weight_len(&self) -> usize {
        self.in_per_group() * self.kernel_h * self.kernel_w
    }

    pub fn per_filter_params(&self) -> u64 {
        (self.filter_weight_len() + usize::from(self.has_bias)) as u64
    }

    pub fn total_params(&self) -> u64 {
        self.out_channels as u64 * self.per_filter_params()
    }

    /// Group index that output channel `filter` belongs to.
    pub fn group_of(&self, filter: usize) -> usize {
        filter / (self.out_channels / self.groups)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }
}

pub fn per_filter_params(layer: &ConvLayerSpec) -> u64 {
    layer.per_filter_params()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnSite {
    pub layer_id: usize,
    pub num_features: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub domain_id: String,
    pub num_classes: usize,
}

impl HeadSpec {
    pub fn new(domain_id: impl Into<String>, num_classes: usize) -> Self {
        Self {
            domain_id: domain_id.into(),
            num_classes,
        }
    }

    pub fn params(&self, in_features: usize) -> u64 {
        (in_features * self.num_classes + self.num_classes) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub schema_version: u32,
    pub name: String,
    pub head_in_features: usize,
    #[serde(default)]
    pub layers: Vec<ConvLayerSpec>,
    #[serde(default)]
    pub bn_sites: Vec<BnSite>,
}

impl ArchitectureSpec {
    pub fn new(
        name: impl Into<String>,
        layers: Vec<ConvLayerSpec>,
        bn_sites: Vec<BnSite>,
        head_in_features: usize,
    ) -> Self {
        Self {
            schema_version: ARCH_SCHEMA_VERSION,
            name: name.into(),
            head_in_features,
            layers,
            bn_sites,
        }
    }

    /// Adds a BN site after every layer.
    pub fn with_bn_everywhere(mut self) -> Self {
        self.bn_sites = self
            .layers
            .iter()
            .map(|l| BnSite {
                layer_id: l.layer_id,
                num_features: l.out_channels,
            })
            .collect();
        self
    }

    pub fn input_channels(&self) -> Option<usize> {
        self.layers.first().map(|l| l.in_channels)
    }

    pub fn num_filters(&self) -> usize {
        self.layers.iter().map(|l| l.out_channels).sum()
    }

    pub fn max_filter_cost(&self) -> u64 {
        self.layers.iter().map(|l| l.per_filter_params()).max().unwrap_or(0)
    }

    /// Index into `bn_sites` for the BN following `layer_id`, if any.
    pub fn bn_site_of(&self, layer_id: usize) -> Option<usize> {
        self.bn_sites.iter().position(|s| s.layer_id == layer_id)
    }

    pub fn bn_params(&self) -> u64 {
        self.bn_sites.iter().map(|s| 2 * s.num_features as u64).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidArchitecture {
            arch: self.name.clone(),
            reason,
        };
        if self.schema_version != ARCH_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: ARCH_SCHEMA_VERSION,
            });
        }
        if self.name.trim().is_empty() {
            return Err(bad("empty name".into()));
        }
        if self.head_in_features == 0 {
            return Err(bad("head_in_features must be positive".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.layer_id != i {
                return Err(bad(format!("layer at position {i} has layer_id {}", l.layer_id)));
            }
            if l.in_channels == 0
                || l.out_channels == 0
                || l.kernel_h == 0
                || l.kernel_w == 0
                || l.groups == 0
                || l.stride == 0
            {
                return Err(bad(format!("layer {i} has a zero-sized field")));
            }
            if l.in_channels % l.groups != 0 || l.out_channels % l.groups != 0 {
                return Err(bad(format!(
                    "layer {i}: groups {} must divide in_channels {} and out_channels {}",
                    l.groups, l.in_channels, l.out_channels
                )));
            }
            if i > 0 && self.layers[i - 1].out_channels != l.in_channels {
                return Err(bad(format!(
                    "layer {i} expects {} input channels but layer {} produces {}",
                    l.in_channels,
                    i - 1,
                    self.layers[i - 1].out_channels
                )));
            }
            if let Some(src) = l.residual_from {
                if src >= i {
                    return Err(bad(format!("layer {i}: residual_from {src} is not an earlier layer")));
                }
                if self.layers[src].out_channels != l.out_channels {
                    return Err(bad(format!(
                        "layer {i}: residual source {src} has {} channels, expected {}",
                        self.layers[src].out_channels, l.out_channels
                    )));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for site in &self.bn_sites {
            let layer = self
                .layers
                .get(site.layer_id)
                .ok_or_else(|| bad(format!("bn_site references missing layer {}", site.layer_id)))?;
            if layer.out_channels != site.num_features {
                return Err(bad(format!(
                    "bn_site on layer {} has {} features, layer has {} filters",
                    site.layer_id, site.num_features, layer.out_channels
                )));
            }
            if !seen.insert(site.layer_id) {
                return Err(bad(format!("layer {} has more than one bn_site", site.layer_id)));
            }
        }
        if let Some(last) = self.layers.last() {
            if last.out_channels != self.head_in_features {
                return Err(bad(format!(
                    "head_in_features {} differs from last layer width {}",
                    self.head_in_features, last.out_channels
                )));
            }
        }
        Ok(())
    }

    /// Spatial size after every layer for an `h×w` input, or a description
    /// of the first layer that cannot accept its input.
    pub fn feature_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let mut sizes: Vec<(usize, usize)> = Vec::with_capacity(self.layers.len());
        let (mut ch, mut cw) = (h, w);
        for l in &self.layers {
            let (oh, ow) = l.output_hw(ch, cw).ok_or_else(|| Error::InvalidArchitecture {
                arch: self.name.clone(),
                reason: format!("layer {} cannot take a {ch}x{cw} input", l.layer_id),
            })?;
            if let Some(src) = l.residual_from {
                if sizes[src] != (oh, ow) {
                    return Err(Error::InvalidArchitecture {
                        arch: self.name.clone(),
                        reason: format!(
                            "layer {}: residual from layer {src} is {:?}, output is {:?}",
                            l.layer_id, sizes[src], (oh, ow)
                        ),
                    });
                }
            }
            sizes.push((oh, ow));
            (ch, cw) = (oh, ow);
        }
        Ok(sizes)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let arch: Self = toml::from_str(text).map_err(|e| Error::format("architecture file", e))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("architecture serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Built-in name (see [`zoo::builtin`]) or a path to a description file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match zoo::builtin(name_or_path) {
            Some(arch) => Ok(arch),
            None => Self::load(Path::new(name_or_path)),
        }
    }
}

/// Conv weights plus conv biases over all layers. BN and classifier
/// parameters are not part of the sharing budget.
pub fn count_conv_params(arch: &ArchitectureSpec) -> u64 {
    arch.layers.iter().map(ConvLayerSpec::total_params).sum()
}

/// Headline parameter figure of a multi-domain model: the live shared conv
/// filters once, plus each domain's specific filters, BN scale/bias and
/// classifier. BN running statistics are buffers and are not counted.
pub fn total_model_params(
    arch: &ArchitectureSpec,
    plan: &SharingPlan,
    heads: &[HeadSpec],
    num_domains: usize,
) -> Result<u64> {
    plan.check_against(arch)?;
    if heads.len() != num_domains {
        return Err(Error::PlanMismatch(format!(
            "{} heads given for {num_domains} domains",
            heads.len()
        )));
    }
    let specific = crate::planner::plan_param_count(plan, arch)?;
    let shared = count_conv_params(arch) - specific;
    let bn = arch.bn_params();
    Ok(shared
        + heads
            .iter()
            .map(|h| specific + bn + h.params(arch.head_in_features))
            .sum::<u64>())
}
