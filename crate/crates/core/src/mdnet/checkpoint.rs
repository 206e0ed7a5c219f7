//! Named-tensor checkpoints.
//!
//! A checkpoint is a directory holding
//!
//! * `tensors.safetensors`: every tensor under a stable name, in the
//!   safetensors layout (8-byte little-endian header length, JSON header,
//!   raw little-endian data),
//! * `manifest.json`: architecture name, plan digest, domain ids, dtype and
//!   the tensor file digest,
//! * `arch.toml` and `plan.toml`, so the directory is self-describing.
//!
//! Names: `shared/L{l}/f{f}` (+ `/bias`), `domain/{id}/L{l}/f{f}` (+ `/bias`),
//! `domain/{id}/bn/L{l}/{scale,bias,running_mean,running_var}`,
//! `domain/{id}/head/{weight,bias}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::MultiDomainModel;
use crate::archspec::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::planner::SharingPlan;
use crate::scalar::Scalar;
use crate::seed::sha256_hex;

/// Tensors of a file plus its string metadata.
pub type TensorsWithMetadata<T> = (Vec<NamedTensor<T>>, BTreeMap<String, String>);

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const TENSOR_FILE: &str = "tensors.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T> NamedTensor<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Serializes tensors in the given order. Header keys are sorted, so equal
/// inputs give equal bytes.
pub fn encode_tensors<T: Scalar>(tensors: &[NamedTensor<T>], metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut offset = 0usize;
    for t in tensors {
        let len = t.data.len() * T::BYTES;
        header.insert(
            t.name.clone(),
            json!({ "dtype": T::DTYPE, "shape": t.shape, "data_offsets": [offset, offset + len] }),
        );
        offset += len;
    }
    if !metadata.is_empty() {
        header.insert("__metadata__".into(), json!(metadata));
    }
    let mut head = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    while !head.len().is_multiple_of(8) {
        head.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + head.len() + offset);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for t in tensors {
        for &v in &t.data {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn decode_tensors<T: Scalar>(bytes: &[u8]) -> Result<TensorsWithMetadata<T>> {
    let bad = |reason: &str| Error::format("tensor file", reason);
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body_start = 8usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: serde_json::Map<String, Value> =
        serde_json::from_slice(&bytes[8..body_start]).map_err(|e| Error::format("tensor file header", e))?;
    let body = &bytes[body_start..];
    let mut metadata = BTreeMap::new();
    let mut entries = Vec::new();
    for (name, info) in header {
        if name == "__metadata__" {
            metadata = serde_json::from_value(info).map_err(|e| Error::format("tensor file metadata", e))?;
            continue;
        }
        let dtype = info["dtype"].as_str().ok_or_else(|| bad("missing dtype"))?;
        if dtype != T::DTYPE {
            return Err(Error::format(
                "tensor file",
                format!("`{name}` has dtype {dtype}, expected {}", T::DTYPE),
            ));
        }
        let shape: Vec<usize> =
            serde_json::from_value(info["shape"].clone()).map_err(|e| Error::format("tensor shape", e))?;
        let offsets: [usize; 2] =
            serde_json::from_value(info["data_offsets"].clone()).map_err(|e| Error::format("tensor offsets", e))?;
        let numel: usize = shape.iter().product();
        if offsets[1] < offsets[0] || offsets[1] > body.len() || offsets[1] - offsets[0] != numel * T::BYTES {
            return Err(Error::format("tensor file", format!("bad data offsets for `{name}`")));
        }
        let data = body[offsets[0]..offsets[1]].chunks_exact(T::BYTES).map(T::read_le).collect();
        entries.push((offsets[0], NamedTensor { name, shape, data }));
    }
    entries.sort_by_key(|(o, _)| *o);
    Ok((entries.into_iter().map(|(_, t)| t).collect(), metadata))
}

pub fn write_tensor_file<T: Scalar>(
    path: &Path,
    tensors: &[NamedTensor<T>],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    std::fs::write(path, encode_tensors(tensors, metadata)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file<T: Scalar>(path: &Path) -> Result<TensorsWithMetadata<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}

/// Where a named tensor lives inside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    SharedWeight { layer: usize, filter: usize },
    SharedBias { layer: usize, filter: usize },
    SpecificWeight { domain: usize, layer: usize, slot: usize },
    SpecificBias { domain: usize, layer: usize, slot: usize },
    BnScale { domain: usize, site: usize },
    BnBias { domain: usize, site: usize },
    BnMean { domain: usize, site: usize },
    BnVar { domain: usize, site: usize },
    HeadWeight { domain: usize },
    HeadBias { domain: usize },
}

/// Which tensors an export contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExportOptions {
    /// Include shared copies of replaced channels.
    pub include_dead: bool,
    /// Include BN running statistics.
    pub include_buffers: bool,
}

impl ExportOptions {
    pub const FULL: ExportOptions = ExportOptions {
        include_dead: true,
        include_buffers: true,
    };

    /// Only the live learnable parameters.
    pub const PARAMETERS: ExportOptions = ExportOptions {
        include_dead: false,
        include_buffers: false,
    };
}

impl<T: Scalar> MultiDomainModel<T> {
    fn slots(&self, opts: ExportOptions) -> Vec<(Slot, String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in &self.arch.layers {
            let wshape = vec![l.in_per_group(), l.kernel_h, l.kernel_w];
            for f in 0..l.out_channels {
                if !opts.include_dead && self.routing[l.layer_id][f].is_some() {
                    continue;
                }
                let base = format!("shared/L{}/f{f}", l.layer_id);
                out.push((Slot::SharedWeight { layer: l.layer_id, filter: f }, base.clone(), wshape.clone()));
                if l.has_bias {
                    out.push((Slot::SharedBias { layer: l.layer_id, filter: f }, format!("{base}/bias"), vec![1]));
                }
            }
        }
        for (d, id) in self.domain_ids.iter().enumerate() {
            for l in &self.arch.layers {
                let wshape = vec![l.in_per_group(), l.kernel_h, l.kernel_w];
                for (slot, &f) in self.params.overlays[d].specific[l.layer_id].filters.iter().enumerate() {
                    let base = format!("domain/{id}/L{}/f{f}", l.layer_id);
                    out.push((Slot::SpecificWeight { domain: d, layer: l.layer_id, slot }, base.clone(), wshape.clone()));
                    if l.has_bias {
                        out.push((
                            Slot::SpecificBias { domain: d, layer: l.layer_id, slot },
                            format!("{base}/bias"),
                            vec![1],
                        ));
                    }
                }
            }
            for (site, s) in self.arch.bn_sites.iter().enumerate() {
                let base = format!("domain/{id}/bn/L{}", s.layer_id);
                let shape = vec![s.num_features];
                out.push((Slot::BnScale { domain: d, site }, format!("{base}/scale"), shape.clone()));
                out.push((Slot::BnBias { domain: d, site }, format!("{base}/bias"), shape.clone()));
                if opts.include_buffers {
                    out.push((Slot::BnMean { domain: d, site }, format!("{base}/running_mean"), shape.clone()));
                    out.push((Slot::BnVar { domain: d, site }, format!("{base}/running_var"), shape));
                }
            }
            let h = &self.params.overlays[d].head;
            out.push((
                Slot::HeadWeight { domain: d },
                format!("domain/{id}/head/weight"),
                vec![h.num_classes, h.in_features],
            ));
            out.push((Slot::HeadBias { domain: d }, format!("domain/{id}/head/bias"), vec![h.num_classes]));
        }
        out
    }

    fn slot_data(&self, slot: Slot) -> &[T] {
        let p = &self.params;
        match slot {
            Slot::SharedWeight { layer, filter } => p.shared[layer].filter(filter),
            Slot::SharedBias { layer, filter } => {
                std::slice::from_ref(&p.shared[layer].bias.as_ref().expect("bias")[filter])
            }
            Slot::SpecificWeight { domain, layer, slot } => p.overlays[domain].specific[layer].params.filter(slot),
            Slot::SpecificBias { domain, layer, slot } => std::slice::from_ref(
                &p.overlays[domain].specific[layer].params.bias.as_ref().expect("bias")[slot],
            ),
            Slot::BnScale { domain, site } => &p.overlays[domain].bn[site].scale,
            Slot::BnBias { domain, site } => &p.overlays[domain].bn[site].bias,
            Slot::BnMean { domain, site } => &self.bn_stats[domain][site].mean,
            Slot::BnVar { domain, site } => &self.bn_stats[domain][site].var,
            Slot::HeadWeight { domain } => &p.overlays[domain].head.weight,
            Slot::HeadBias { domain } => &p.overlays[domain].head.bias,
        }
    }

    fn slot_data_mut(&mut self, slot: Slot) -> &mut [T] {
        let stats = &mut self.bn_stats;
        let p = &mut self.params;
        match slot {
            Slot::SharedWeight { layer, filter } => p.shared[layer].filter_mut(filter),
            Slot::SharedBias { layer, filter } => {
                std::slice::from_mut(&mut p.shared[layer].bias.as_mut().expect("bias")[filter])
            }
            Slot::SpecificWeight { domain, layer, slot } => p.overlays[domain].specific[layer].params.filter_mut(slot),
            Slot::SpecificBias { domain, layer, slot } => std::slice::from_mut(
                &mut p.overlays[domain].specific[layer].params.bias.as_mut().expect("bias")[slot],
            ),
            Slot::BnScale { domain, site } => &mut p.overlays[domain].bn[site].scale,
            Slot::BnBias { domain, site } => &mut p.overlays[domain].bn[site].bias,
            Slot::BnMean { domain, site } => &mut stats[domain][site].mean,
            Slot::BnVar { domain, site } => &mut stats[domain][site].var,
            Slot::HeadWeight { domain } => &mut p.overlays[domain].head.weight,
            Slot::HeadBias { domain } => &mut p.overlays[domain].head.bias,
        }
    }

    /// Every tensor selected by `opts`, named and in a fixed order.
    pub fn named_tensors(&self, opts: ExportOptions) -> Vec<NamedTensor<T>> {
        self.slots(opts)
            .into_iter()
            .map(|(slot, name, shape)| NamedTensor::new(name, shape, self.slot_data(slot).to_vec()))
            .collect()
    }

    /// Overwrites tensors by name. Every expected tensor (per `opts`) must be
    /// present with the right shape; unknown names are rejected.
    pub fn load_named_tensors(&mut self, tensors: Vec<NamedTensor<T>>, opts: ExportOptions) -> Result<()> {
        let mut by_name: BTreeMap<String, NamedTensor<T>> = tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        for (slot, name, shape) in self.slots(opts) {
            let t = by_name.remove(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape != shape || t.data.len() != t.numel() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape,
                });
            }
            self.slot_data_mut(slot).copy_from_slice(&t.data);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::format("checkpoint", format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// Digest over every tensor, dead copies and BN statistics included.
    pub fn state_digest(&self) -> String {
        sha256_hex(&encode_tensors(&self.named_tensors(ExportOptions::FULL), &BTreeMap::new()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub arch_name: String,
    pub plan_digest: String,
    pub domain_ids: Vec<String>,
    pub num_classes: Vec<usize>,
    pub dtype: String,
    pub omit_dead: bool,
    pub tensor_file: String,
    pub tensors_sha256: String,
}

pub fn save_checkpoint<T: Scalar>(model: &MultiDomainModel<T>, dir: &Path, omit_dead: bool) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let opts = ExportOptions {
        include_dead: !omit_dead,
        include_buffers: true,
    };
    let mut meta = BTreeMap::new();
    meta.insert("arch_name".to_string(), model.arch.name.clone());
    meta.insert("plan_digest".to_string(), model.plan.digest());
    let bytes = encode_tensors(&model.named_tensors(opts), &meta);
    let tensor_path = dir.join(TENSOR_FILE);
    std::fs::write(&tensor_path, &bytes).map_err(|e| Error::io(&tensor_path, e))?;
    model.arch.save(&dir.join("arch.toml"))?;
    model.plan.save(&dir.join("plan.toml"))?;
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        arch_name: model.arch.name.clone(),
        plan_digest: model.plan.digest(),
        domain_ids: model.domain_ids.clone(),
        num_classes: model.heads.iter().map(|h| h.num_classes).collect(),
        dtype: T::DTYPE.to_string(),
        omit_dead,
        tensor_file: TENSOR_FILE.to_string(),
        tensors_sha256: sha256_hex(&bytes),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::format("checkpoint manifest", e))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.schema_version,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    Ok(manifest)
}

/// Loads a checkpoint, cross-checking the plan digest and tensor digest
/// recorded in the manifest.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<MultiDomainModel<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::format(
            "checkpoint",
            format!("stored dtype {} but {} requested", manifest.dtype, T::DTYPE),
        ));
    }
    let arch = ArchitectureSpec::load(&dir.join("arch.toml"))?;
    let plan = SharingPlan::load(&dir.join("plan.toml"), &arch)?;
    if plan.digest() != manifest.plan_digest || arch.name != manifest.arch_name {
        return Err(Error::PlanMismatch("checkpoint plan does not match its manifest".into()));
    }
    let tensor_path: PathBuf = dir.join(&manifest.tensor_file);
    let bytes = std::fs::read(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
    if sha256_hex(&bytes) != manifest.tensors_sha256 {
        return Err(Error::format("checkpoint", "tensor file digest differs from manifest"));
    }
    let (tensors, _) = decode_tensors::<T>(&bytes)?;
    let heads: Vec<_> = manifest
        .domain_ids
        .iter()
        .zip(&manifest.num_classes)
        .map(|(id, &k)| crate::archspec::HeadSpec::new(id.clone(), k))
        .collect();
    let mut model = MultiDomainModel::assemble(&arch, &plan, &heads)?;
    model.load_named_tensors(
        tensors,
        ExportOptions {
            include_dead: !manifest.omit_dead,
            include_buffers: true,
        },
    )?;
    Ok(model)
}
