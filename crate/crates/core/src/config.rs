//! Run configuration: a TOML file with the sections `model`, `method`,
//! `dataset`, `buffer`, `sparsity`, `dropout`, `ema`, `training`, `seeds`
//! and `output`. Unknown keys are rejected, and validation reports every
//! problem at once.
//!
//! Overrides take the form `section.key=value`, or `key=value` when the key
//! name occurs in exactly one section. Values are parsed as TOML literals,
//! falling back to a bare string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GcilWeighting;
use crate::dropout::DropoutConfig;
use crate::error::{Error, Result};
use crate::memory::ConsolidationConfig;
use crate::net::SgdConfig;
use crate::sparse::SparsityRatio;
use crate::trainer::{AugmentConfig, Components, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Scommer,
    Er,
    Sgd,
    Joint,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Scommer => "scommer",
            Method::Er => "er",
            Method::Sgd => "sgd",
            Method::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scommer" => Ok(Method::Scommer),
            "er" => Ok(Method::Er),
            "sgd" => Ok(Method::Sgd),
            "joint" => Ok(Method::Joint),
            other => Err(Error::Config(vec![format!("unknown method {other:?} (expected scommer, er, sgd or joint)")])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Filters of the two conv layers.
    pub filters: [usize; 2],
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { filters: [16, 32], hidden: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSection {
    pub name: Method,
    /// The three SCoMMER component switches (ignored by the baselines).
    pub sparse_activations: bool,
    pub semantic_dropout: bool,
    pub long_term_memory: bool,
}

impl Default for MethodSection {
    fn default() -> Self {
        MethodSection {
            name: Method::Scommer,
            sparse_activations: true,
            semantic_dropout: true,
            long_term_memory: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// IDX files in `path` (MNIST layout).
    Idx,
    /// Built-in Gaussian-blob images.
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Split,
    Gcil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    /// Keep at most this many training items per class.
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub stream: StreamKind,
    pub tasks: usize,
    pub samples_per_task: usize,
    pub max_classes: usize,
    pub weighting: GcilWeighting,
    pub stream_seed: u64,
    pub blob_classes: usize,
    pub blob_shape: Vec<usize>,
    pub blob_noise: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Idx,
            path: Some(PathBuf::from("data/mnist-desk")),
            train_per_class: None,
            test_per_class: None,
            stream: StreamKind::Split,
            tasks: 5,
            samples_per_task: 200,
            max_classes: 5,
            weighting: GcilWeighting::Unif,
            stream_seed: 1993,
            blob_classes: 10,
            blob_shape: vec![1, 12, 12],
            blob_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BufferSection {
    pub size: usize,
    pub batch_size: usize,
}

impl Default for BufferSection {
    fn default() -> Self {
        BufferSection { size: 200, batch_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparsitySection {
    /// `%k` of the first and the last (dropout-enabled) conv layer.
    pub ratios: [f64; 2],
}

impl Default for SparsitySection {
    fn default() -> Self {
        SparsitySection { ratios: [0.9, 0.8] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub augment: Option<AugmentConfig>,
    pub audit: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 5,
            gamma: 0.15,
            augment: None,
            audit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedsSection {
    pub list: Vec<u64>,
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection { list: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub checkpoint: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs/default"), checkpoint: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub method: MethodSection,
    pub dataset: DatasetSection,
    pub buffer: BufferSection,
    pub sparsity: SparsitySection,
    pub dropout: DropoutConfig,
    pub ema: ConsolidationConfig,
    pub training: TrainingSection,
    pub seeds: SeedsSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, &[]).map_err(|e| match e {
            Error::Config(items) => {
                Error::Config(items.into_iter().map(|m| format!("{}: {m}", path.display())).collect())
            }
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, applies `overrides` in order, then validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies overrides to an already parsed config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_with(&self.to_toml()?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.model.filters.contains(&0) || self.model.hidden == 0 {
            errs.push("model.filters and model.hidden must be positive".to_string());
        }
        for r in self.sparsity.ratios {
            if SparsityRatio::new(r).is_err() {
                errs.push(format!("sparsity.ratios entries must lie in (0, 1], got {r}"));
            }
        }
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Idx if d.path.is_none() => errs.push("dataset.path is required for idx datasets".into()),
            DatasetKind::Blobs => {
                if d.blob_classes < 2 {
                    errs.push("dataset.blob_classes must be at least 2".into());
                }
                if d.blob_shape.len() != 3 || d.blob_shape.contains(&0) {
                    errs.push(format!(
                        "dataset.blob_shape must be [C, H, W] with positive sizes, got {:?}",
                        d.blob_shape
                    ));
                } else if d.blob_shape[1] < 10 || d.blob_shape[2] < 10 {
                    errs.push("dataset.blob_shape needs H, W >= 10 for the conv stack".into());
                }
                if !(d.blob_noise >= 0.0 && d.blob_noise.is_finite()) {
                    errs.push(format!("dataset.blob_noise must be non-negative, got {}", d.blob_noise));
                }
            }
            _ => {}
        }
        if d.tasks == 0 {
            errs.push("dataset.tasks must be positive".into());
        }
        if d.train_per_class == Some(0) || d.test_per_class == Some(0) {
            errs.push("dataset per-class limits must be positive when given".into());
        }
        if self.seeds.list.is_empty() {
            errs.push("seeds.list must name at least one seed".into());
        }
        if let Err(Error::Config(more)) = self.train_config().validate() {
            errs.extend(more);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Component switches implied by the method.
    pub fn components(&self) -> Components {
        let m = &self.method;
        match m.name {
            Method::Scommer => Components {
                replay: true,
                sparse_activations: m.sparse_activations,
                semantic_dropout: m.semantic_dropout,
                long_term_memory: m.long_term_memory,
            },
            Method::Er => {
                Components { replay: true, sparse_activations: false, semantic_dropout: false, long_term_memory: false }
            }
            Method::Sgd | Method::Joint => Components {
                replay: false,
                sparse_activations: false,
                semantic_dropout: false,
                long_term_memory: false,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            sgd: SgdConfig { lr: t.lr, momentum: t.momentum, weight_decay: t.weight_decay },
            batch_size: t.batch_size,
            replay_batch_size: self.buffer.batch_size,
            buffer_size: self.buffer.size,
            epochs: t.epochs,
            gamma: t.gamma,
            components: self.components(),
            ema: self.ema,
            dropout: self.dropout,
            augment: t.augment,
            audit: t.audit,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

const SECTIONS: [&str; 10] =
    ["model", "method", "dataset", "buffer", "sparsity", "dropout", "ema", "training", "seeds", "output"];

/// Section names that own `key` in the default configuration.
fn sections_with(key: &str) -> Vec<&'static str> {
    let defaults = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    let mut known: Vec<&'static str> =
        SECTIONS.iter().copied().filter(|s| defaults.get(s).and_then(|t| t.get(key)).is_some()).collect();
    // optional keys absent from the serialized defaults
    for (section, k) in
        [("dataset", "path"), ("dataset", "train_per_class"), ("dataset", "test_per_class"), ("training", "augment")]
    {
        if k == key && !known.contains(&section) {
            known.push(section);
        }
    }
    known
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        return Err(Error::Config(vec![format!("override {spec:?} must look like KEY=VALUE")]));
    };
    let key = key.trim().trim_start_matches("--");
    let path: Vec<String> = match key.split_once('.') {
        Some((s, rest)) => {
            if !SECTIONS.contains(&s) {
                return Err(Error::Config(vec![format!("override {key:?}: unknown section {s:?}")]));
            }
            std::iter::once(s.to_string()).chain(rest.split('.').map(str::to_string)).collect()
        }
        None => match sections_with(key)[..] {
            [section] => vec![section.to_string(), key.to_string()],
            [] => return Err(Error::Config(vec![format!("override {key:?}: no such key in any section")])),
            ref many => {
                return Err(Error::Config(vec![format!(
                    "override {key:?} is ambiguous; qualify it with one of {many:?}"
                )]))
            }
        },
    };
    let value = parse_value(raw.trim());
    let mut table = doc;
    for part in &path[..path.len() - 1] {
        let entry = table.entry(part.clone()).or_insert_with(|| toml::Value::Table(Default::default()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(vec![format!("override {key:?}: {part:?} is not a table")]))?;
    }
    table.insert(path[path.len() - 1].clone(), value);
    Ok(())
}
