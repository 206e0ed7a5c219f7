//! Multi-domain model: one shared backbone plus a per-domain overlay of
//! domain-specific filters, BN layers and a classifier.
//!
//! In the forward pass for domain `d`, every output channel listed in the
//! plan is produced by `d`'s own filter instead of the shared one, reading
//! the same layer input. The mixed activation map then feeds `d`'s BN, the
//! activation and the next layer, so replacement composes down the network.
//! Shared copies of replaced channels stay in the store but never take part
//! in any domain's computation.

pub mod checkpoint;

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::archspec::{ArchitectureSpec, HeadSpec};
use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, BatchStats, ConvGeom, RunningStats, Tensor4};
use crate::planner::{plan_param_count, SharingPlan};
use crate::scalar::Scalar;
use crate::seed::rng_for;

/// All filters of one layer: `weight` is `out × (in/groups × kh × kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub filter_len: usize,
}

impl<T: Scalar> ConvParams<T> {
    fn zeros(filters: usize, filter_len: usize, has_bias: bool) -> Self {
        Self {
            weight: vec![T::zero(); filters * filter_len],
            bias: has_bias.then(|| vec![T::zero(); filters]),
            filter_len,
        }
    }

    pub fn filters(&self) -> usize {
        self.weight.len() / self.filter_len.max(1)
    }

    pub fn filter(&self, i: usize) -> &[T] {
        &self.weight[i * self.filter_len..(i + 1) * self.filter_len]
    }

    pub fn filter_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.weight[i * self.filter_len..(i + 1) * self.filter_len]
    }

    pub fn bias_of(&self, i: usize) -> Option<T> {
        self.bias.as_ref().map(|b| b[i])
    }
}

/// A domain's private copies of the plan's filters in one layer. Slot `k`
/// holds filter `filters[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecificFilters<T> {
    pub filters: Vec<usize>,
    pub params: ConvParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnAffine<T> {
    pub scale: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub num_classes: usize,
    pub in_features: usize,
    /// `num_classes × in_features`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Learnable parameters owned by one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayParams<T> {
    /// Indexed by layer id; empty for layers without selected filters.
    pub specific: Vec<SpecificFilters<T>>,
    /// Indexed by position in `arch.bn_sites`.
    pub bn: Vec<BnAffine<T>>,
    pub head: HeadParams<T>,
}

/// The full learnable state, also used as the shape of gradients and
/// optimizer buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub shared: Vec<ConvParams<T>>,
    pub overlays: Vec<OverlayParams<T>>,
}

/// Address of one learnable unit. Conv parameters are addressed per filter
/// (weights plus bias, if any).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRef {
    SharedFilter { layer: usize, filter: usize },
    SpecificFilter { domain: usize, layer: usize, filter: usize },
    BnScale { domain: usize, site: usize },
    BnBias { domain: usize, site: usize },
    HeadWeight { domain: usize },
    HeadBias { domain: usize },
}

impl ParamRef {
    pub fn domain(&self) -> Option<usize> {
        match *self {
            ParamRef::SharedFilter { .. } => None,
            ParamRef::SpecificFilter { domain, .. }
            | ParamRef::BnScale { domain, .. }
            | ParamRef::BnBias { domain, .. }
            | ParamRef::HeadWeight { domain }
            | ParamRef::HeadBias { domain } => Some(domain),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn zeros_like(&self) -> Self {
        let zero_conv = |c: &ConvParams<T>| ConvParams {
            weight: vec![T::zero(); c.weight.len()],
            bias: c.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
            filter_len: c.filter_len,
        };
        Self {
            shared: self.shared.iter().map(zero_conv).collect(),
            overlays: self
                .overlays
                .iter()
                .map(|o| OverlayParams {
                    specific: o
                        .specific
                        .iter()
                        .map(|s| SpecificFilters {
                            filters: s.filters.clone(),
                            params: zero_conv(&s.params),
                        })
                        .collect(),
                    bn: o
                        .bn
                        .iter()
                        .map(|b| BnAffine {
                            scale: vec![T::zero(); b.scale.len()],
                            bias: vec![T::zero(); b.bias.len()],
                        })
                        .collect(),
                    head: HeadParams {
                        num_classes: o.head.num_classes,
                        in_features: o.head.in_features,
                        weight: vec![T::zero(); o.head.weight.len()],
                        bias: vec![T::zero(); o.head.bias.len()],
                    },
                })
                .collect(),
        }
    }

    fn slot(&self, domain: usize, layer: usize, filter: usize) -> usize {
        self.overlays[domain].specific[layer]
            .filters
            .binary_search(&filter)
            .expect("filter present in overlay")
    }

    /// Value slices making up one unit: a filter yields its weights and,
    /// when present, a one-element bias slice.
    pub fn tensors(&self, r: &ParamRef) -> Vec<&[T]> {
        match *r {
            ParamRef::SharedFilter { layer, filter } => {
                let c = &self.shared[layer];
                let mut out = vec![c.filter(filter)];
                if let Some(b) = &c.bias {
                    out.push(std::slice::from_ref(&b[filter]));
                }
                out
            }
            ParamRef::SpecificFilter { domain, layer, filter } => {
                let slot = self.slot(domain, layer, filter);
                let c = &self.overlays[domain].specific[layer].params;
                let mut out = vec![c.filter(slot)];
                if let Some(b) = &c.bias {
                    out.push(std::slice::from_ref(&b[slot]));
                }
                out
            }
            ParamRef::BnScale { domain, site } => vec![&self.overlays[domain].bn[site].scale],
            ParamRef::BnBias { domain, site } => vec![&self.overlays[domain].bn[site].bias],
            ParamRef::HeadWeight { domain } => vec![&self.overlays[domain].head.weight],
            ParamRef::HeadBias { domain } => vec![&self.overlays[domain].head.bias],
        }
    }

    pub fn tensors_mut(&mut self, r: &ParamRef) -> Vec<&mut [T]> {
        match *r {
            ParamRef::SharedFilter { layer, filter } => {
                let c = &mut self.shared[layer];
                let fl = c.filter_len;
                let mut out = vec![&mut c.weight[filter * fl..(filter + 1) * fl]];
                if let Some(b) = c.bias.as_mut() {
                    out.push(std::slice::from_mut(&mut b[filter]));
                }
                out
            }
            ParamRef::SpecificFilter { domain, layer, filter } => {
                let slot = self.slot(domain, layer, filter);
                let c = &mut self.overlays[domain].specific[layer].params;
                let fl = c.filter_len;
                let mut out = vec![&mut c.weight[slot * fl..(slot + 1) * fl]];
                if let Some(b) = c.bias.as_mut() {
                    out.push(std::slice::from_mut(&mut b[slot]));
                }
                out
            }
            ParamRef::BnScale { domain, site } => vec![&mut self.overlays[domain].bn[site].scale],
            ParamRef::BnBias { domain, site } => vec![&mut self.overlays[domain].bn[site].bias],
            ParamRef::HeadWeight { domain } => vec![&mut self.overlays[domain].head.weight],
            ParamRef::HeadBias { domain } => vec![&mut self.overlays[domain].head.bias],
        }
    }

    pub fn is_all_zero(&self, r: &ParamRef) -> bool {
        self.tensors(r).iter().all(|t| t.iter().all(|v| *v == T::zero()))
    }
}

/// Per-layer values retained by a training forward pass.
#[derive(Debug, Clone)]
struct LayerCache<T> {
    bn: Option<BatchNormCache<T>>,
    pre_activation: Tensor4<T>,
    output: Tensor4<T>,
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    domain: usize,
    input: Tensor4<T>,
    layers: Vec<LayerCache<T>>,
    pooled: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainModel<T> {
    arch: ArchitectureSpec,
    plan: SharingPlan,
    heads: Vec<HeadSpec>,
    domain_ids: Vec<String>,
    params: ParamSet<T>,
    /// `[domain][bn site]`
    bn_stats: Vec<Vec<RunningStats<T>>>,
    /// `[layer][filter]` -> slot in the layer's specific filters
    routing: Vec<Vec<Option<usize>>>,
}

impl<T: Scalar> MultiDomainModel<T> {
    /// Builds the model with seed-0 random shared filters and heads. Use
    /// [`MultiDomainModel::init_random`] or the trainer's initializer for
    /// other starting points.
    pub fn assemble(arch: &ArchitectureSpec, plan: &SharingPlan, heads: &[HeadSpec]) -> Result<Self> {
        arch.validate()?;
        if arch.layers.is_empty() {
            return Err(Error::InvalidArchitecture {
                arch: arch.name.clone(),
                reason: "no convolution layers".into(),
            });
        }
        plan_param_count(plan, arch)?;
        if heads.is_empty() {
            return Err(Error::Config("a model needs at least one domain".into()));
        }
        let mut seen = HashSet::new();
        for h in heads {
            if !seen.insert(h.domain_id.as_str()) {
                return Err(Error::DuplicateDomain(h.domain_id.clone()));
            }
            if h.num_classes < 2 {
                return Err(Error::Config(format!(
                    "domain `{}` needs at least 2 classes, has {}",
                    h.domain_id, h.num_classes
                )));
            }
        }

        let shared: Vec<ConvParams<T>> = arch
            .layers
            .iter()
            .map(|l| ConvParams::zeros(l.out_channels, l.filter_weight_len(), l.has_bias))
            .collect();
        let routing: Vec<Vec<Option<usize>>> = arch
            .layers
            .iter()
            .map(|l| {
                let mut r = vec![None; l.out_channels];
                for (slot, f) in plan.selected_in(l.layer_id).enumerate() {
                    r[f] = Some(slot);
                }
                r
            })
            .collect();
        let overlays = heads
            .iter()
            .map(|h| OverlayParams {
                specific: arch
                    .layers
                    .iter()
                    .map(|l| {
                        let filters: Vec<usize> = plan.selected_in(l.layer_id).collect();
                        SpecificFilters {
                            params: ConvParams::zeros(filters.len(), l.filter_weight_len(), l.has_bias),
                            filters,
                        }
                    })
                    .collect(),
                bn: arch
                    .bn_sites
                    .iter()
                    .map(|s| BnAffine {
                        scale: vec![T::one(); s.num_features],
                        bias: vec![T::zero(); s.num_features],
                    })
                    .collect(),
                head: HeadParams {
                    num_classes: h.num_classes,
                    in_features: arch.head_in_features,
                    weight: vec![T::zero(); h.num_classes * arch.head_in_features],
                    bias: vec![T::zero(); h.num_classes],
                },
            })
            .collect();
        let bn_stats = heads
            .iter()
            .map(|_| arch.bn_sites.iter().map(|s| RunningStats::reset(s.num_features)).collect())
            .collect();
        let mut model = Self {
            arch: arch.clone(),
            plan: plan.clone(),
            heads: heads.to_vec(),
            domain_ids: heads.iter().map(|h| h.domain_id.clone()).collect(),
            params: ParamSet { shared, overlays },
            bn_stats,
            routing,
        };
        model.init_random(0);
        Ok(model)
    }

    /// Seeded random start: He-normal shared filters (zero biases), specific
    /// filters copied from the shared ones, identity BN with reset
    /// statistics, uniform heads. Each stream is keyed by layer or domain
    /// id, so a domain's head does not depend on which other domains exist.
    pub fn init_random(&mut self, seed: u64) {
        for (l, layer) in self.arch.layers.iter().enumerate() {
            let std = (2.0 / layer.filter_weight_len() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let mut rng = rng_for(seed, &format!("init/shared/L{l}"));
            let conv = &mut self.params.shared[l];
            conv.weight.iter_mut().for_each(|w| *w = T::lit(normal.sample(&mut rng)));
            if let Some(b) = conv.bias.as_mut() {
                b.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        for d in 0..self.domain_ids.len() {
            self.init_head_random(d, seed);
        }
        self.sync_specific_from_shared();
        self.reset_bn();
    }

    pub(crate) fn init_head_random(&mut self, domain: usize, seed: u64) {
        let mut rng = rng_for(seed, &format!("init/head/{}", self.domain_ids[domain]));
        let head = &mut self.params.overlays[domain].head;
        let bound = 1.0 / (head.in_features as f64).sqrt();
        for w in head.weight.iter_mut().chain(head.bias.iter_mut()) {
            *w = T::lit(rng.random_range(-bound..bound));
        }
    }

    /// Copies every selected shared filter into every domain's overlay.
    pub fn sync_specific_from_shared(&mut self) {
        let shared = &self.params.shared;
        for overlay in &mut self.params.overlays {
            for (l, spec) in overlay.specific.iter_mut().enumerate() {
                for (slot, &f) in spec.filters.iter().enumerate() {
                    spec.params.filter_mut(slot).copy_from_slice(shared[l].filter(f));
                    if let (Some(dst), Some(src)) = (spec.params.bias.as_mut(), shared[l].bias.as_ref()) {
                        dst[slot] = src[f];
                    }
                }
            }
        }
    }

    /// Identity BN transforms and reset running statistics for all domains.
    pub fn reset_bn(&mut self) {
        for (overlay, stats) in self.params.overlays.iter_mut().zip(&mut self.bn_stats) {
            for (bn, st) in overlay.bn.iter_mut().zip(stats.iter_mut()) {
                bn.scale.iter_mut().for_each(|v| *v = T::one());
                bn.bias.iter_mut().for_each(|v| *v = T::zero());
                *st = RunningStats::reset(bn.scale.len());
            }
        }
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn plan(&self) -> &SharingPlan {
        &self.plan
    }

    pub fn heads(&self) -> &[HeadSpec] {
        &self.heads
    }

    pub fn domain_ids(&self) -> &[String] {
        &self.domain_ids
    }

    pub fn domain_index(&self, domain_id: &str) -> Result<usize> {
        self.domain_ids
            .iter()
            .position(|d| d == domain_id)
            .ok_or_else(|| Error::UnknownDomain(domain_id.to_string()))
    }

    pub fn num_classes(&self, domain: usize) -> usize {
        self.heads[domain].num_classes
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn shared(&self) -> &[ConvParams<T>] {
        &self.params.shared
    }

    pub fn overlay(&self, domain: usize) -> &OverlayParams<T> {
        &self.params.overlays[domain]
    }

    pub fn bn_stats(&self, domain: usize) -> &[RunningStats<T>] {
        &self.bn_stats[domain]
    }

    #[cfg(test)]
    pub(crate) fn bn_stats_mut(&mut self, domain: usize) -> &mut [RunningStats<T>] {
        &mut self.bn_stats[domain]
    }

    /// Slot of `filter` in layer `layer`'s specific filters, if replaced.
    pub fn specific_slot(&self, layer: usize, filter: usize) -> Option<usize> {
        self.routing[layer][filter]
    }

    /// Every learnable unit in the model, dead shared copies included.
    pub fn all_params(&self) -> BTreeSet<ParamRef> {
        let mut out = BTreeSet::new();
        for l in &self.arch.layers {
            for f in 0..l.out_channels {
                out.insert(ParamRef::SharedFilter {
                    layer: l.layer_id,
                    filter: f,
                });
            }
        }
        for d in 0..self.domain_ids.len() {
            out.extend(self.overlay_params(d));
        }
        out
    }

    fn overlay_params(&self, domain: usize) -> impl Iterator<Item = ParamRef> + '_ {
        let filters = self.plan.selection.iter().flat_map(move |(&layer, fs)| {
            fs.iter().map(move |&filter| ParamRef::SpecificFilter { domain, layer, filter })
        });
        let bn = (0..self.arch.bn_sites.len())
            .flat_map(move |site| [ParamRef::BnScale { domain, site }, ParamRef::BnBias { domain, site }]);
        filters
            .chain(bn)
            .chain([ParamRef::HeadWeight { domain }, ParamRef::HeadBias { domain }])
    }

    /// Units a loss on `domain` may update: shared filters the plan does not
    /// replace, plus the domain's whole overlay.
    pub fn trainable_params(&self, domain: usize) -> BTreeSet<ParamRef> {
        let mut out = BTreeSet::new();
        for l in &self.arch.layers {
            for f in 0..l.out_channels {
                if self.routing[l.layer_id][f].is_none() {
                    out.insert(ParamRef::SharedFilter {
                        layer: l.layer_id,
                        filter: f,
                    });
                }
            }
        }
        out.extend(self.overlay_params(domain));
        out
    }

    /// Shared copies of replaced channels, unused by every domain.
    pub fn dead_shared_params(&self) -> BTreeSet<ParamRef> {
        self.plan
            .selection
            .iter()
            .flat_map(|(&layer, fs)| fs.iter().map(move |&filter| ParamRef::SharedFilter { layer, filter }))
            .collect()
    }

    /// Checkpoint-style name of a unit.
    pub fn param_name(&self, r: &ParamRef) -> String {
        match *r {
            ParamRef::SharedFilter { layer, filter } => format!("shared/L{layer}/f{filter}"),
            ParamRef::SpecificFilter { domain, layer, filter } => {
                format!("domain/{}/L{layer}/f{filter}", self.domain_ids[domain])
            }
            ParamRef::BnScale { domain, site } => {
                format!("domain/{}/bn/L{}/scale", self.domain_ids[domain], self.arch.bn_sites[site].layer_id)
            }
            ParamRef::BnBias { domain, site } => {
                format!("domain/{}/bn/L{}/bias", self.domain_ids[domain], self.arch.bn_sites[site].layer_id)
            }
            ParamRef::HeadWeight { domain } => format!("domain/{}/head/weight", self.domain_ids[domain]),
            ParamRef::HeadBias { domain } => format!("domain/{}/head/bias", self.domain_ids[domain]),
        }
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let expected_c = self.arch.layers[0].in_channels;
        let found = x.shape().to_vec();
        if x.c != expected_c || x.n == 0 {
            return Err(Error::ShapeMismatch {
                name: "input".into(),
                expected: vec![x.n.max(1), expected_c, x.h, x.w],
                found,
            });
        }
        self.arch.feature_sizes(x.h, x.w).map_err(|e| Error::ShapeMismatch {
            name: format!("input ({e})"),
            expected: vec![x.n, expected_c],
            found: x.shape().to_vec(),
        })?;
        Ok(())
    }

    fn conv_layer(&self, domain: usize, layer: usize, input: &Tensor4<T>) -> Tensor4<T> {
        let spec = &self.arch.layers[layer];
        let shared = &self.params.shared[layer];
        let specific = &self.params.overlays[domain].specific[layer].params;
        let routing = &self.routing[layer];
        ops::conv2d_forward(input, &ConvGeom::from(spec), |oc| match routing[oc] {
            Some(slot) => (specific.filter(slot), specific.bias_of(slot)),
            None => (shared.filter(oc), shared.bias_of(oc)),
        })
    }

    fn run(
        &self,
        domain: usize,
        x: &Tensor4<T>,
        train: bool,
    ) -> (Vec<T>, ForwardCache<T>, Vec<Option<BatchStats<T>>>) {
        let mut layers: Vec<LayerCache<T>> = Vec::with_capacity(self.arch.layers.len());
        let mut batch_stats = vec![None; self.arch.bn_sites.len()];
        let overlay = &self.params.overlays[domain];
        for (l, spec) in self.arch.layers.iter().enumerate() {
            let input = if l == 0 { x } else { &layers[l - 1].output };
            let conv = self.conv_layer(domain, l, input);
            let (mut pre, bn_cache) = match self.arch.bn_site_of(l) {
                Some(site) => {
                    let affine = &overlay.bn[site];
                    if train {
                        let (y, cache, stats) = ops::batch_norm_train(&conv, &affine.scale, &affine.bias);
                        batch_stats[site] = Some(stats);
                        (y, Some(cache))
                    } else {
                        let y = ops::batch_norm_eval(&conv, &affine.scale, &affine.bias, &self.bn_stats[domain][site]);
                        (y, None)
                    }
                }
                None => (conv, None),
            };
            if let Some(src) = spec.residual_from {
                pre.add_assign(&layers[src].output);
            }
            let mut output = pre.clone();
            ops::activate(spec.activation, &mut output);
            layers.push(LayerCache {
                bn: bn_cache,
                pre_activation: pre,
                output,
            });
        }
        let last = &layers.last().expect("at least one layer").output;
        let pooled = ops::global_avg_pool(last);
        let head = &overlay.head;
        let logits = ops::linear(&pooled, head.in_features, &head.weight, &head.bias);
        let cache = ForwardCache {
            domain,
            input: x.clone(),
            layers,
            pooled,
        };
        (logits, cache, batch_stats)
    }

    /// Evaluation-mode logits (`N × num_classes`, row-major) for `domain_id`
    /// with frozen BN statistics. Does not mutate the model.
    pub fn forward(&self, domain_id: &str, x: &Tensor4<T>) -> Result<Vec<T>> {
        let d = self.domain_index(domain_id)?;
        self.forward_index(d, x)
    }

    pub fn forward_index(&self, domain: usize, x: &Tensor4<T>) -> Result<Vec<T>> {
        self.check_input(x)?;
        Ok(self.run(domain, x, false).0)
    }

    /// Training-mode forward: BN uses batch statistics, and the domain's
    /// running statistics absorb them.
    pub fn forward_train(&mut self, domain: usize, x: &Tensor4<T>) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let (logits, cache, stats) = self.run(domain, x, true);
        for (site, s) in stats.into_iter().enumerate() {
            if let Some(s) = s {
                self.bn_stats[domain][site].update(&s);
            }
        }
        Ok((logits, cache))
    }

    /// Gradients of a loss w.r.t. every parameter, given `dlogits` for the
    /// forward pass recorded in `cache`. Units outside
    /// `trainable_params(cache.domain)` come back exactly zero.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> ParamSet<T> {
        let d = cache.domain;
        let mut grads = self.params.zeros_like();
        let overlay = &self.params.overlays[d];
        let head = &overlay.head;
        let (dpooled, dw, db) =
            ops::linear_backward(&cache.pooled, head.in_features, &head.weight, dlogits, head.num_classes);
        grads.overlays[d].head.weight = dw;
        grads.overlays[d].head.bias = db;

        let n_layers = self.arch.layers.len();
        let last = &cache.layers[n_layers - 1].output;
        let mut d_out: Vec<Option<Tensor4<T>>> = vec![None; n_layers];
        d_out[n_layers - 1] = Some(ops::global_avg_pool_backward(&dpooled, last.n, last.c, last.h, last.w));

        for l in (0..n_layers).rev() {
            let spec = &self.arch.layers[l];
            let lc = &cache.layers[l];
            let mut g = match d_out[l].take() {
                Some(g) => g,
                None => continue,
            };
            ops::activate_backward(spec.activation, &lc.pre_activation, &mut g);
            if let Some(src) = spec.residual_from {
                accumulate(&mut d_out[src], &g);
            }
            let g_conv = match (self.arch.bn_site_of(l), &lc.bn) {
                (Some(site), Some(bn_cache)) => {
                    let (dx, dscale, dbias) = ops::batch_norm_backward(&g, &overlay.bn[site].scale, bn_cache);
                    grads.overlays[d].bn[site].scale = dscale;
                    grads.overlays[d].bn[site].bias = dbias;
                    dx
                }
                _ => g,
            };
            let input = if l == 0 { &cache.input } else { &cache.layers[l - 1].output };
            let shared = &self.params.shared[l];
            let specific = &overlay.specific[l].params;
            let routing = &self.routing[l];
            let (gs, go) = split_layer_grads(&mut grads, d, l);
            let dx = ops::conv2d_backward(
                input,
                &ConvGeom::from(spec),
                &g_conv,
                |oc| match routing[oc] {
                    Some(slot) => (specific.filter(slot), specific.bias_of(slot)),
                    None => (shared.filter(oc), shared.bias_of(oc)),
                },
                |oc, dw, db| {
                    let (target, idx) = match routing[oc] {
                        Some(slot) => (&mut *go, slot),
                        None => (&mut *gs, oc),
                    };
                    target.filter_mut(idx).copy_from_slice(dw);
                    if let (Some(b), Some(db)) = (target.bias.as_mut(), db) {
                        b[idx] = db;
                    }
                },
                l > 0,
            );
            if let Some(dx) = dx {
                accumulate(&mut d_out[l - 1], &dx);
            }
        }
        grads
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor4<T>>, g: &Tensor4<T>) {
    match slot {
        Some(acc) => acc.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

fn split_layer_grads<T>(grads: &mut ParamSet<T>, domain: usize, layer: usize) -> (&mut ConvParams<T>, &mut ConvParams<T>) {
    let ParamSet { shared, overlays } = grads;
    (&mut shared[layer], &mut overlays[domain].specific[layer].params)
}

impl fmt::Display for ParamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ParamRef::SharedFilter { layer, filter } => write!(f, "shared/L{layer}/f{filter}"),
            ParamRef::SpecificFilter { domain, layer, filter } => write!(f, "domain#{domain}/L{layer}/f{filter}"),
            ParamRef::BnScale { domain, site } => write!(f, "domain#{domain}/bn{site}/scale"),
            ParamRef::BnBias { domain, site } => write!(f, "domain#{domain}/bn{site}/bias"),
            ParamRef::HeadWeight { domain } => write!(f, "domain#{domain}/head/weight"),
            ParamRef::HeadBias { domain } => write!(f, "domain#{domain}/head/bias"),
        }
    }
}
