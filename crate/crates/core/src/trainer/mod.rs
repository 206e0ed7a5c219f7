//! Joint multi-domain training.
//!
//! Domains take turns in a fixed round-robin order (the model's domain
//! order). One round is one batch per domain; each batch drives one
//! optimizer step that touches only the units in that domain's trainable
//! set, so a step on one domain never moves another domain's overlay or
//! the dead shared copies. Learning rate schedules count rounds, which makes
//! a one-domain run step-for-step comparable with any domain of a joint run.

pub mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::accuracy;
use crate::bench::data::{BatchSampler, DomainDataset, SplitKind};
use crate::error::{Error, Result};
use crate::mdnet::checkpoint::{read_tensor_file, save_checkpoint, NamedTensor};
use crate::mdnet::{MultiDomainModel, ParamRef, ParamSet};
use crate::ops;
use crate::scalar::Scalar;

pub use metrics::{MetricRow, MetricsHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `gamma` every `step_rounds` rounds.
    StepDecay { step_rounds: usize, gamma: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::StepDecay {
            step_rounds: 100,
            gamma: 0.3,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, base: f64, round: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { step_rounds, gamma } => base * gamma.powi((round / step_rounds) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Schedule length; one round is one batch for every domain.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Batch size per domain.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Seeds batch order; model initialization has its own [`InitSpec`].
    #[serde(default)]
    pub seed: u64,
    /// Validation accuracy is recorded every this many rounds and at the end.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Where to dump the model if the loss stops being finite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_dir: Option<PathBuf>,
}

fn default_rounds() -> usize {
    200
}
fn default_batch() -> usize {
    32
}
fn default_eval_every() -> usize {
    50
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: default_rounds(),
            batch_size: default_batch(),
            optimizer: OptimizerConfig::default(),
            lr_schedule: LrSchedule::default(),
            seed: 0,
            eval_every: default_eval_every(),
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("trainer.rounds must be positive");
        }
        if self.batch_size == 0 {
            return bad("trainer.batch_size must be positive");
        }
        if self.eval_every == 0 {
            return bad("trainer.eval_every must be positive");
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return bad("trainer.optimizer.lr must be positive");
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return bad("trainer.optimizer.momentum must lie in [0, 1)");
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return bad("trainer.optimizer.weight_decay must be non-negative");
        }
        if let LrSchedule::StepDecay { step_rounds, gamma } = self.lr_schedule {
            if step_rounds == 0 || !(gamma > 0.0 && gamma <= 1.0) {
                return bad("trainer.lr_schedule needs step_rounds > 0 and gamma in (0, 1]");
            }
        }
        Ok(())
    }
}

/// Starting point of a model. Without files, everything comes from the
/// seeded random scheme of [`MultiDomainModel::init_random`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    #[serde(default)]
    pub seed: u64,
    /// Tensor file with `L{l}/weight` (`out × in/groups × kh × kw`) and
    /// `L{l}/bias` entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_weights: Option<PathBuf>,
    /// Per-domain tensor files with `weight` (`classes × features`) and
    /// `bias` entries.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub head_weights: BTreeMap<String, PathBuf>,
}

/// Applies `init`: shared filters from the backbone file or the seed,
/// specific filters copied from the resulting shared filters, heads from
/// their files or the seed, BN reset to identity.
pub fn initialize<T: Scalar>(model: &mut MultiDomainModel<T>, init: &InitSpec) -> Result<()> {
    model.init_random(init.seed);
    if let Some(path) = &init.backbone_weights {
        let (tensors, _) = read_tensor_file::<T>(path)?;
        let by_name: BTreeMap<_, _> = tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let arch = model.arch().clone();
        for layer in &arch.layers {
            let l = layer.layer_id;
            let name = format!("L{l}/weight");
            let shape = vec![layer.out_channels, layer.in_per_group(), layer.kernel_h, layer.kernel_w];
            let t = take_tensor(&by_name, &name, &shape)?;
            model.params_mut().shared[l].weight.copy_from_slice(&t.data);
            if layer.has_bias {
                let name = format!("L{l}/bias");
                let t = take_tensor(&by_name, &name, &[layer.out_channels])?;
                model.params_mut().shared[l].bias = Some(t.data.clone());
            }
        }
    }
    for (domain_id, path) in &init.head_weights {
        let d = model.domain_index(domain_id)?;
        let (tensors, _) = read_tensor_file::<T>(path)?;
        let by_name: BTreeMap<_, _> = tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let (k, f) = {
            let h = &model.overlay(d).head;
            (h.num_classes, h.in_features)
        };
        let w = take_tensor(&by_name, "weight", &[k, f]).map_err(|e| rename(e, domain_id))?;
        let b = take_tensor(&by_name, "bias", &[k]).map_err(|e| rename(e, domain_id))?;
        let head = &mut model.params_mut().overlays[d].head;
        head.weight.copy_from_slice(&w.data);
        head.bias.copy_from_slice(&b.data);
    }
    model.sync_specific_from_shared();
    model.reset_bn();
    Ok(())
}

fn rename(e: Error, domain_id: &str) -> Error {
    match e {
        Error::ShapeMismatch { name, expected, found } => Error::ShapeMismatch {
            name: format!("head[{domain_id}]/{name}"),
            expected,
            found,
        },
        Error::MissingTensor(name) => Error::MissingTensor(format!("head[{domain_id}]/{name}")),
        other => other,
    }
}

fn take_tensor<'a, T>(
    by_name: &'a BTreeMap<String, NamedTensor<T>>,
    name: &str,
    shape: &[usize],
) -> Result<&'a NamedTensor<T>> {
    let t = by_name.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    if t.shape != shape || t.data.len() != t.numel() {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: t.shape.clone(),
        });
    }
    Ok(t)
}

/// Shared filters in the layout [`initialize`] reads.
pub fn backbone_tensors<T: Scalar>(model: &MultiDomainModel<T>) -> Vec<NamedTensor<T>> {
    let mut out = Vec::new();
    for layer in &model.arch().layers {
        let p = &model.shared()[layer.layer_id];
        out.push(NamedTensor::new(
            format!("L{}/weight", layer.layer_id),
            vec![layer.out_channels, layer.in_per_group(), layer.kernel_h, layer.kernel_w],
            p.weight.clone(),
        ));
        if let Some(b) = &p.bias {
            out.push(NamedTensor::new(format!("L{}/bias", layer.layer_id), vec![layer.out_channels], b.clone()));
        }
    }
    out
}

pub fn head_tensors<T: Scalar>(model: &MultiDomainModel<T>, domain: usize) -> Vec<NamedTensor<T>> {
    let h = &model.overlay(domain).head;
    vec![
        NamedTensor::new("weight", vec![h.num_classes, h.in_features], h.weight.clone()),
        NamedTensor::new("bias", vec![h.num_classes], h.bias.clone()),
    ]
}

/// Momentum SGD with coupled weight decay, updating one unit set per step.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    velocity: ParamSet<T>,
    momentum: T,
    weight_decay: T,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &MultiDomainModel<T>, cfg: &OptimizerConfig) -> Self {
        Self {
            velocity: model.params().zeros_like(),
            momentum: T::lit(cfg.momentum),
            weight_decay: T::lit(cfg.weight_decay),
        }
    }

    /// `v ← μ·v + g + λ·p; p ← p − lr·v` on every unit in `units`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, units: &[ParamRef], lr: T) {
        for r in units {
            let g = grads.tensors(r);
            let v = self.velocity.tensors_mut(r);
            let p = params.tensors_mut(r);
            for ((p, v), g) in p.into_iter().zip(v).zip(g) {
                for i in 0..p.len() {
                    v[i] = self.momentum * v[i] + g[i] + self.weight_decay * p[i];
                    p[i] -= lr * v[i];
                }
            }
        }
    }
}

fn check_datasets<'a, T: Scalar>(
    model: &MultiDomainModel<T>,
    datasets: &'a [DomainDataset<T>],
) -> Result<Vec<&'a DomainDataset<T>>> {
    let ids: BTreeSet<&str> = datasets.iter().map(|d| d.domain_id.as_str()).collect();
    if ids.len() != datasets.len() {
        return Err(Error::Config("datasets contain a duplicate domain".into()));
    }
    let mut ordered = Vec::with_capacity(model.domain_ids().len());
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
        if ds.channels != model.arch().layers[0].in_channels {
            return Err(Error::ShapeMismatch {
                name: format!("dataset `{id}` images"),
                expected: vec![model.arch().layers[0].in_channels],
                found: vec![ds.channels],
            });
        }
        ds.validate()?;
        ordered.push(ds);
    }
    if ordered.len() != datasets.len() {
        let extra = datasets
            .iter()
            .find(|ds| model.domain_index(&ds.domain_id).is_err())
            .map(|ds| ds.domain_id.clone())
            .unwrap_or_default();
        return Err(Error::UnknownDomain(extra));
    }
    Ok(ordered)
}

/// Trains `model` in place and returns the metrics history: one
/// `train/loss` row per domain step and `val/accuracy` rows every
/// `eval_every` rounds and after the last round.
pub fn train_joint<T: Scalar>(
    model: &mut MultiDomainModel<T>,
    datasets: &[DomainDataset<T>],
    cfg: &TrainConfig,
) -> Result<MetricsHistory> {
    cfg.validate()?;
    let datasets = check_datasets(model, datasets)?;
    for ds in &datasets {
        if ds.train.is_empty() {
            return Err(Error::EmptySplit {
                domain: ds.domain_id.clone(),
                split: "train".into(),
            });
        }
    }
    let mut samplers: Vec<BatchSampler> = datasets
        .iter()
        .map(|ds| BatchSampler::new(ds.train.len(), cfg.batch_size, cfg.seed, &ds.domain_id))
        .collect();
    let units: Vec<Vec<ParamRef>> = (0..datasets.len())
        .map(|d| model.trainable_params(d).into_iter().collect())
        .collect();
    let mut sgd = Sgd::new(model, &cfg.optimizer);
    let mut history = MetricsHistory::default();

    for round in 0..cfg.rounds {
        let lr = T::lit(cfg.lr_schedule.rate(cfg.optimizer.lr, round));
        for (d, ds) in datasets.iter().enumerate() {
            let indices = samplers[d].next_indices();
            let (x, labels) = ds.batch(SplitKind::Train, &indices);
            let (logits, cache) = model.forward_train(d, &x)?;
            let (loss, dlogits) = ops::softmax_cross_entropy(&logits, model.num_classes(d), &labels);
            if !loss.is_finite() {
                let dump = match &cfg.dump_dir {
                    Some(dir) => Some(dump_state(model, dir, round, &ds.domain_id)?),
                    None => None,
                };
                return Err(Error::Diverged {
                    round,
                    domain: ds.domain_id.clone(),
                    dump,
                });
            }
            let grads = model.backward(&cache, &dlogits);
            sgd.step(model.params_mut(), &grads, &units[d], lr);
            history.push(round + 1, &ds.domain_id, "train", "loss", loss.as_f64());
        }
        if (round + 1) % cfg.eval_every == 0 || round + 1 == cfg.rounds {
            for (d, ds) in datasets.iter().enumerate() {
                if ds.val.is_empty() {
                    continue;
                }
                let acc = accuracy(model, d, ds, SplitKind::Val)?;
                history.push(round + 1, &ds.domain_id, "val", "accuracy", acc);
            }
            log::debug!("round {} done", round + 1);
        }
    }
    Ok(history)
}

fn dump_state<T: Scalar>(model: &MultiDomainModel<T>, dir: &Path, round: usize, domain: &str) -> Result<PathBuf> {
    let path = dir.join(format!("diverged-round{round}-{domain}"));
    save_checkpoint(model, &path, false)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{zoo, HeadSpec};
    use crate::bench::data::{generate_synthetic, PatternStyle, SyntheticSpec};
    use crate::mdnet::checkpoint::write_tensor_file;
    use crate::planner::{build_plan, Strategy};

    fn dataset(id: &str, style: PatternStyle, classes: usize) -> DomainDataset<f64> {
        generate_synthetic(
            id,
            &SyntheticSpec {
                style,
                num_classes: classes,
                channels: 3,
                size: 8,
                train_per_class: 8,
                val_per_class: 4,
                noise: 0.2,
                seed: 3,
            },
        )
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            rounds: 6,
            batch_size: 8,
            eval_every: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.optimizer.lr = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            rounds: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            lr_schedule: LrSchedule::StepDecay { step_rounds: 0, gamma: 0.5 },
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule::StepDecay { step_rounds: 10, gamma: 0.5 };
        assert_eq!(s.rate(0.1, 9), 0.1);
        assert_eq!(s.rate(0.1, 10), 0.05);
        assert_eq!(LrSchedule::Constant.rate(0.1, 1000), 0.1);
    }

    #[test]
    fn history_rows_and_determinism() {
        let arch = zoo::desk_cnn();
        let plan = build_plan(&arch, Strategy::BottomSpecific, 0.2, 0).unwrap();
        let data = vec![dataset("a", PatternStyle::Stripes, 3), dataset("b", PatternStyle::Spots, 4)];
        let heads = [HeadSpec::new("a", 3), HeadSpec::new("b", 4)];
        let run = || {
            let mut m = MultiDomainModel::<f64>::assemble(&arch, &plan, &heads).unwrap();
            let h = train_joint(&mut m, &data, &small_cfg()).unwrap();
            (m.state_digest(), h)
        };
        let (d1, h1) = run();
        let (d2, h2) = run();
        assert_eq!(d1, d2);
        assert_eq!(h1, h2);
        assert_eq!(h1.series("a", "train", "loss").len(), 6);
        assert_eq!(h1.series("b", "val", "accuracy").iter().map(|r| r.0).collect::<Vec<_>>(), vec![3, 6]);
    }

    #[test]
    fn dataset_mismatches_rejected() {
        let arch = zoo::desk_cnn();
        let plan = build_plan(&arch, Strategy::BottomSpecific, 0.0, 0).unwrap();
        let mut m = MultiDomainModel::<f64>::assemble(&arch, &plan, &[HeadSpec::new("a", 3)]).unwrap();
        let cfg = small_cfg();
        assert!(train_joint(&mut m, &[], &cfg).is_err());
        assert!(train_joint(&mut m, &[dataset("a", PatternStyle::Spots, 4)], &cfg).is_err());
        let extra = vec![dataset("a", PatternStyle::Spots, 3), dataset("z", PatternStyle::Spots, 3)];
        assert!(matches!(train_joint(&mut m, &extra, &cfg), Err(Error::UnknownDomain(_))));
        let mut bad = dataset("a", PatternStyle::Spots, 3);
        bad.train.labels[0] = 7;
        assert!(matches!(
            train_joint(&mut m, &[bad], &cfg),
            Err(Error::LabelOutOfRange { label: 7, .. })
        ));
    }

    #[test]
    fn divergence_aborts_with_dump() {
        let arch = zoo::desk_cnn();
        let plan = build_plan(&arch, Strategy::BottomSpecific, 0.0, 0).unwrap();
        let mut m = MultiDomainModel::<f64>::assemble(&arch, &plan, &[HeadSpec::new("a", 3)]).unwrap();
        let ds = dataset("a", PatternStyle::Spots, 3);
        m.params_mut().overlays[0].head.bias[0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            batch_size: 24,
            dump_dir: Some(dir.path().to_path_buf()),
            ..small_cfg()
        };
        match train_joint(&mut m, &[ds], &cfg) {
            Err(Error::Diverged { round: 0, dump: Some(p), .. }) => assert!(p.join("manifest.json").exists()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn initialize_is_deterministic_and_resets_bn() {
        let arch = zoo::desk_cnn();
        let plan = build_plan(&arch, Strategy::Random, 0.4, 2).unwrap();
        let heads = [HeadSpec::new("a", 3), HeadSpec::new("b", 5)];
        let mut m1 = MultiDomainModel::<f32>::assemble(&arch, &plan, &heads).unwrap();
        let mut m2 = m1.clone();
        m2.params_mut().overlays[0].bn[0].scale[0] = 9.0;
        let init = InitSpec { seed: 17, ..InitSpec::default() };
        initialize(&mut m1, &init).unwrap();
        initialize(&mut m2, &init).unwrap();
        assert_eq!(m1.state_digest(), m2.state_digest());
        assert_eq!(m1.overlay(0).bn[0].scale[0], 1.0);
        let (l, f) = plan.selection.iter().map(|(l, fs)| (*l, *fs.iter().next().unwrap())).next().unwrap();
        let slot = m1.specific_slot(l, f).unwrap();
        assert_eq!(m1.overlay(1).specific[l].params.filter(slot), m1.shared()[l].filter(f));
    }

    #[test]
    fn initialize_from_files() {
        let arch = zoo::desk_cnn();
        let plan = build_plan(&arch, Strategy::BottomSpecific, 0.3, 0).unwrap();
        let heads = [HeadSpec::new("a", 3), HeadSpec::new("b", 5)];
        let mut donor = MultiDomainModel::<f64>::assemble(&arch, &plan, &heads).unwrap();
        donor.init_random(99);
        let dir = tempfile::tempdir().unwrap();
        let backbone = dir.path().join("backbone.safetensors");
        write_tensor_file(&backbone, &backbone_tensors(&donor), &BTreeMap::new()).unwrap();
        let head_b = dir.path().join("head_b.safetensors");
        write_tensor_file(&head_b, &head_tensors(&donor, 1), &BTreeMap::new()).unwrap();

        let mut m = MultiDomainModel::<f64>::assemble(&arch, &plan, &heads).unwrap();
        let init = InitSpec {
            seed: 1,
            backbone_weights: Some(backbone.clone()),
            head_weights: [("b".to_string(), head_b.clone())].into_iter().collect(),
        };
        initialize(&mut m, &init).unwrap();
        assert_eq!(m.shared(), donor.shared());
        assert_eq!(m.overlay(1).head, donor.overlay(1).head);
        assert_ne!(m.overlay(0).head, donor.overlay(0).head);
        assert_eq!(m.overlay(0).specific[0].params.filter(0), donor.shared()[0].filter(0));

        // a head file with the wrong class count is rejected by tensor name
        let wrong = [HeadSpec::new("a", 3), HeadSpec::new("b", 4)];
        let mut m = MultiDomainModel::<f64>::assemble(&arch, &plan, &wrong).unwrap();
        let init = InitSpec {
            seed: 1,
            backbone_weights: None,
            head_weights: [("b".to_string(), head_b)].into_iter().collect(),
        };
        match initialize(&mut m, &init) {
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "head[b]/weight"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
