//! Per-domain labeled image data.
//!
//! Two sources are supported. Synthetic domains are generated from a seed
//! and a pattern style, so every run sees identical pixels. Directory
//! domains are read from a cache directory laid out as
//!
//! ```text
//! $MDSHARE_DATA_DIR/<name>/meta.toml   # num_classes, channels, height, width
//! $MDSHARE_DATA_DIR/<name>/train.csv   # label,p0,p1,... (C*H*W values, CHW order)
//! $MDSHARE_DATA_DIR/<name>/val.csv
//! ```

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Tensor4;
use crate::scalar::Scalar;
use crate::seed::rng_for;

pub const DATA_DIR_ENV: &str = "MDSHARE_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternStyle {
    /// Oriented sinusoidal gratings with random phase.
    Stripes,
    /// Colored discs at random positions.
    Spots,
    /// Checkerboards with class-specific period and channel contrast.
    Checker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub style: PatternStyle,
    pub num_classes: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}
fn default_size() -> usize {
    16
}
fn default_noise() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Synthetic(SyntheticSpec),
    /// Directory under the data cache (or an absolute path).
    Directory { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    pub source: SourceSpec,
}

/// One split: images in `N×C×H×W` order plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub images: Vec<T>,
    pub labels: Vec<usize>,
}

impl<T> Split<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset<T> {
    pub domain_id: String,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train: Split<T>,
    pub val: Split<T>,
    pub source: SourceSpec,
}

impl<T: Scalar> DomainDataset<T> {
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn split(&self, kind: SplitKind) -> &Split<T> {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
        }
    }

    /// Gathers `indices` of a split into a batch tensor.
    pub fn batch(&self, kind: SplitKind, indices: &[usize]) -> (Tensor4<T>, Vec<usize>) {
        let split = self.split(kind);
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&split.images[i * len..(i + 1) * len]);
            labels.push(split.labels[i]);
        }
        (
            Tensor4::from_vec(indices.len(), self.channels, self.height, self.width, data),
            labels,
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (name, split) in [("train", &self.train), ("val", &self.val)] {
            if split.images.len() != split.len() * self.image_len() {
                return Err(Error::format(
                    format!("dataset `{}`", self.domain_id),
                    format!("{name} split pixel count does not match its labels"),
                ));
            }
            if let Some(&label) = split.labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(Error::LabelOutOfRange {
                    domain: self.domain_id.clone(),
                    label,
                    num_classes: self.num_classes,
                });
            }
        }
        Ok(())
    }

    pub fn load(spec: &DomainSpec) -> Result<Self> {
        let ds = match &spec.source {
            SourceSpec::Synthetic(s) => generate_synthetic(&spec.id, s)?,
            SourceSpec::Directory { path } => read_directory(&spec.id, &resolve_data_path(path))?,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the directory layout described in the module docs.
    pub fn write_directory(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = DirectoryMeta {
            num_classes: self.num_classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
        };
        let meta_path = dir.join("meta.toml");
        std::fs::write(&meta_path, toml::to_string(&meta).expect("meta serializes"))
            .map_err(|e| Error::io(&meta_path, e))?;
        for (name, split) in [("train.csv", &self.train), ("val.csv", &self.val)] {
            let path = dir.join(name);
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(&path)
                .map_err(|e| Error::format(path.display().to_string(), e))?;
            let len = self.image_len();
            for (i, &label) in split.labels.iter().enumerate() {
                let mut row = vec![label.to_string()];
                row.extend(split.images[i * len..(i + 1) * len].iter().map(|v| v.as_f64().to_string()));
                w.write_record(&row).map_err(|e| Error::format(path.display().to_string(), e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DirectoryMeta {
    num_classes: usize,
    channels: usize,
    height: usize,
    width: usize,
}

/// Relative paths resolve against `$MDSHARE_DATA_DIR` when it is set.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn read_directory<T: Scalar>(id: &str, dir: &Path) -> Result<DomainDataset<T>> {
    let meta_path = dir.join("meta.toml");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DirectoryMeta = toml::from_str(&text).map_err(|e| Error::format("dataset meta.toml", e))?;
    let len = meta.channels * meta.height * meta.width;
    let read_split = |name: &str| -> Result<Split<T>> {
        let path = dir.join(name);
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(|e| Error::format(path.display().to_string(), e))?;
        let mut split = Split {
            images: Vec::new(),
            labels: Vec::new(),
        };
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(path.display().to_string(), e))?;
            if rec.len() != len + 1 {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("row {line} has {} values, expected {}", rec.len(), len + 1),
                ));
            }
            let label: usize = rec[0]
                .trim()
                .parse()
                .map_err(|e| Error::format(path.display().to_string(), format!("row {line}: {e}")))?;
            split.labels.push(label);
            for v in rec.iter().skip(1) {
                let v: f64 = v
                    .trim()
                    .parse()
                    .map_err(|e| Error::format(path.display().to_string(), format!("row {line}: {e}")))?;
                split.images.push(T::lit(v));
            }
        }
        Ok(split)
    };
    Ok(DomainDataset {
        domain_id: id.to_string(),
        num_classes: meta.num_classes,
        channels: meta.channels,
        height: meta.height,
        width: meta.width,
        train: read_split("train.csv")?,
        val: read_split("val.csv")?,
        source: SourceSpec::Directory { path: dir.to_path_buf() },
    })
}

/// Class-level parameters of a synthetic pattern family.
struct ClassPattern {
    color: Vec<f64>,
    angle: f64,
    freq: f64,
    radius: f64,
    period: usize,
}

pub fn generate_synthetic<T: Scalar>(id: &str, spec: &SyntheticSpec) -> Result<DomainDataset<T>> {
    if spec.num_classes < 2 || spec.channels == 0 || spec.size < 4 {
        return Err(Error::Config(format!(
            "synthetic domain `{id}` needs ≥2 classes, ≥1 channel and size ≥4"
        )));
    }
    if spec.train_per_class == 0 {
        return Err(Error::EmptySplit {
            domain: id.to_string(),
            split: "train".into(),
        });
    }
    if spec.val_per_class == 0 {
        return Err(Error::EmptySplit {
            domain: id.to_string(),
            split: "val".into(),
        });
    }
    let mut class_rng = rng_for(spec.seed, &format!("data/{id}/classes"));
    let k = spec.num_classes;
    let patterns: Vec<ClassPattern> = (0..k)
        .map(|c| ClassPattern {
            color: (0..spec.channels).map(|_| class_rng.random_range(-1.0..1.0)).collect(),
            angle: PI * c as f64 / k as f64,
            freq: if c % 2 == 0 { 0.9 } else { 1.6 },
            radius: 1.5 + (c % 3) as f64,
            period: 1 + c % 4,
        })
        .collect();
    let gen_split = |label: &str, per_class: usize| -> Split<T> {
        let mut rng = rng_for(spec.seed, &format!("data/{id}/{label}"));
        let mut split = Split {
            images: Vec::with_capacity(per_class * k * spec.channels * spec.size * spec.size),
            labels: Vec::with_capacity(per_class * k),
        };
        for _ in 0..per_class {
            for (c, pattern) in patterns.iter().enumerate() {
                render(spec, pattern, &mut rng, &mut split.images);
                split.labels.push(c);
            }
        }
        split
    };
    Ok(DomainDataset {
        domain_id: id.to_string(),
        num_classes: k,
        channels: spec.channels,
        height: spec.size,
        width: spec.size,
        train: gen_split("train", spec.train_per_class),
        val: gen_split("val", spec.val_per_class),
        source: SourceSpec::Synthetic(spec.clone()),
    })
}

fn render<T: Scalar>(spec: &SyntheticSpec, p: &ClassPattern, rng: &mut ChaCha8Rng, out: &mut Vec<T>) {
    let s = spec.size;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let gain = rng.random_range(0.8..1.2);
    let mut plane = vec![0.0f64; s * s];
    match spec.style {
        PatternStyle::Stripes => {
            let phase = rng.random_range(0.0..2.0 * PI);
            let (sin, cos) = p.angle.sin_cos();
            for y in 0..s {
                for x in 0..s {
                    plane[y * s + x] = (p.freq * (x as f64 * cos + y as f64 * sin) + phase).sin();
                }
            }
        }
        PatternStyle::Spots => {
            for _ in 0..3 {
                let cx = rng.random_range(0.0..s as f64);
                let cy = rng.random_range(0.0..s as f64);
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        if d2 <= p.radius * p.radius {
                            plane[y * s + x] = 1.0;
                        }
                    }
                }
            }
        }
        PatternStyle::Checker => {
            let ox = rng.random_range(0..2 * p.period);
            let oy = rng.random_range(0..2 * p.period);
            for y in 0..s {
                for x in 0..s {
                    let cell = ((x + ox) / p.period + (y + oy) / p.period) % 2;
                    plane[y * s + x] = if cell == 0 { 1.0 } else { -1.0 };
                }
            }
        }
    }
    for ch in 0..spec.channels {
        // Stripes carry class identity in orientation; color is a weak cue.
        let tint = match spec.style {
            PatternStyle::Stripes => 0.5 + 0.5 * p.color[ch].abs(),
            _ => p.color[ch],
        };
        for &v in &plane {
            out.push(T::lit(gain * tint * v + noise.sample(rng)));
        }
    }
}

/// Endless, seeded sequence of training batches for one domain: the train
/// split is reshuffled at every pass and read in consecutive chunks.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64, domain_id: &str) -> Self {
        Self {
            rng: rng_for(seed, &format!("sampler/{domain_id}")),
            order: (0..len).collect(),
            cursor: len,
            batch_size,
        }
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (self.batch_size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}
