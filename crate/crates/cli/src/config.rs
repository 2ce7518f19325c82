//! Run configuration: flat dotted keys (`schedule.lambda = 0.1`) read from a
//! TOML-compatible file, then overridden by command-line flags of the same
//! names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dvc_core::model::{ArchitectureSpec, Variant, DEFAULT_LATENT_DIM};
use dvc_core::train::TrainSchedule;
use dvc_core::ImageShape;
use serde::Serialize;

use crate::CliError;

/// Every key accepted in a config file or as a `--key value` flag.
pub const KEYS: &[(&str, &str)] = &[
    (
        "run.name",
        "run label used by `report` (defaults to the output directory name)",
    ),
    ("data.source", "idx | folder | synth"),
    ("data.images", "IDX image file (.gz accepted)"),
    ("data.labels", "IDX label file, optional"),
    ("data.folder", "image folder root"),
    ("data.height", "folder images are resized to this height"),
    ("data.width", "folder images are resized to this width"),
    ("data.grayscale", "convert folder images to one channel"),
    ("data.limit", "use only the first N samples"),
    ("data.k", "synthetic clusters"),
    ("data.per_cluster", "synthetic samples per cluster"),
    ("data.dim", "synthetic dimension (a square number gives a 1xSxS image)"),
    ("data.separation", "synthetic center separation"),
    ("data.noise_sigma", "synthetic per-cluster standard deviation"),
    ("data.seed", "synthetic data seed (defaults to the run seed)"),
    ("model.variant", "mlp | conv"),
    ("model.latent_dim", "latent dimension"),
    ("model.mlp_dims", "hidden widths of the dense encoder, comma separated"),
    (
        "model.conv_channels",
        "channels per stride-2 conv stage, comma separated",
    ),
    ("cluster.k", "number of clusters"),
    ("schedule.lambda", "clustering loss weight in (0, 1)"),
    ("schedule.delta", "label-change stopping threshold"),
    ("schedule.update_interval", "iterations between target updates"),
    ("schedule.batch_size", "mini-batch size"),
    ("schedule.base_lr", "initial learning rate"),
    ("schedule.lr_decay_every", "iterations between learning-rate decays"),
    ("schedule.lr_decay_factor", "learning-rate divisor per decay"),
    ("schedule.max_iterations", "joint-phase iteration budget"),
    ("schedule.pretrain_iterations", "pretraining iterations"),
    ("schedule.weight_decay", "L2 weight decay"),
    ("schedule.momentum", "SGD momentum, 0 for plain SGD"),
    ("schedule.alpha", "Student's-t degrees of freedom"),
    ("schedule.gamma", "focusing exponent of the frequency penalty"),
    ("schedule.target", "dvc_modified | dec_baseline"),
    (
        "schedule.kmeans_restarts",
        "K-means restarts for centroid initialization",
    ),
    ("schedule.pretrain_mode", "end_to_end | layer_wise"),
    (
        "schedule.layerwise_iterations",
        "iterations per layer pair in layer-wise pretraining",
    ),
    ("schedule.dropout", "input dropout rate for layer-wise pretraining"),
    (
        "schedule.clustering_gradient",
        "false disables the clustering gradient (ablation)",
    ),
];

/// Raw string values keyed by dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig(pub BTreeMap<String, String>);

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, String>) -> Result<(), String> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let text = match v {
            toml::Value::Table(t) => {
                flatten(&key, t, out)?;
                continue;
            }
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|i| match i {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(n) => Ok(n.to_string()),
                    toml::Value::Float(f) => Ok(f.to_string()),
                    _ => Err(format!("{key}: unsupported list element")),
                })
                .collect::<Result<Vec<_>, _>>()?
                .join(","),
            toml::Value::Datetime(d) => d.to_string(),
        };
        out.insert(key, text);
    }
    Ok(())
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let mut map = BTreeMap::new();
        flatten("", &table, &mut map).map_err(CliError::Usage)?;
        let raw = Self(map);
        raw.check_known()?;
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn check_known(&self) -> Result<(), CliError> {
        let unknown: Vec<&str> = self
            .0
            .keys()
            .map(String::as_str)
            .filter(|k| !matches!(*k, "seed" | "output") && !KEYS.iter().any(|(name, _)| name == k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.0.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

/// Typed field access that collects every problem before failing.
struct Fields<'a> {
    raw: &'a RawConfig,
    errors: Vec<String>,
}

impl Fields<'_> {
    fn parse<T: FromStr>(&mut self, key: &str, default: T) -> T
    where
        T::Err: std::fmt::Display,
    {
        match self.raw.get(key) {
            None => default,
            Some(text) => match text.trim().parse() {
                Ok(v) => v,
                Err(e) => {
                    self.errors.push(format!("{key}: cannot parse `{text}`: {e}"));
                    default
                }
            },
        }
    }

    fn optional<T: FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        let text = self.raw.get(key)?;
        match text.trim().parse() {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(format!("{key}: cannot parse `{text}`: {e}"));
                None
            }
        }
    }

    fn list(&mut self, key: &str) -> Option<Vec<usize>> {
        let text = self.raw.get(key)?;
        let parsed: Result<Vec<usize>, _> = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect();
        match parsed {
            Ok(v) if !v.is_empty() => Some(v),
            _ => {
                self.errors.push(format!(
                    "{key}: expected a comma-separated list of positive integers, got `{text}`"
                ));
                None
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Idx {
        images: PathBuf,
        labels: Option<PathBuf>,
    },
    Folder {
        root: PathBuf,
        height: usize,
        width: usize,
        grayscale: bool,
    },
    Synth {
        k: usize,
        per_cluster: usize,
        dim: usize,
        separation: f64,
        noise_sigma: f64,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArchConfig {
    pub variant: Variant,
    pub latent_dim: usize,
    pub mlp_dims: Option<Vec<usize>>,
    pub conv_channels: Option<Vec<usize>>,
}

impl ArchConfig {
    /// The architecture for inputs of `shape`.
    pub fn spec(&self, shape: ImageShape) -> ArchitectureSpec {
        let mut spec = ArchitectureSpec::new(self.variant, shape);
        spec.latent_dim = self.latent_dim;
        if let (Variant::MlpDvc2, Some(dims)) = (self.variant, &self.mlp_dims) {
            spec.mlp_dims = dims.clone();
        }
        if let (Variant::ConvDvc1, Some(ch)) = (self.variant, &self.conv_channels) {
            spec.conv_channels = ch.clone();
        }
        spec
    }
}

/// Fully resolved configuration; serialized into every run manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub run_name: Option<String>,
    pub data: DataConfig,
    pub limit: Option<usize>,
    pub arch: ArchConfig,
    pub schedule: TrainSchedule,
    pub k: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    /// Resolves defaults and validates. Every bad field is reported at once.
    pub fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        raw.check_known()?;
        let mut f = Fields {
            raw,
            errors: Vec::new(),
        };
        let seed: u64 = f.parse("seed", 0);
        let output_dir: PathBuf = f.parse("output", PathBuf::from("runs/default"));

        let source = match raw.get("data.source") {
            Some(s) => s.to_string(),
            None if raw.get("data.images").is_some() => "idx".into(),
            None if raw.get("data.folder").is_some() => "folder".into(),
            None => "synth".into(),
        };
        let data = match source.as_str() {
            "idx" => {
                let images: Option<PathBuf> = f.optional("data.images");
                let labels: Option<PathBuf> = f.optional("data.labels");
                match images {
                    None => {
                        f.errors.push("data.images: required for data.source = idx".into());
                        None
                    }
                    Some(images) => {
                        for p in std::iter::once(&images).chain(labels.as_ref()) {
                            if !p.exists() {
                                f.errors.push(format!("data: {} does not exist", p.display()));
                            }
                        }
                        Some(DataConfig::Idx { images, labels })
                    }
                }
            }
            "folder" => {
                let root: Option<PathBuf> = f.optional("data.folder");
                let height = f.parse("data.height", 28);
                let width = f.parse("data.width", 28);
                let grayscale = f.parse("data.grayscale", true);
                match root {
                    Some(root) if root.is_dir() => Some(DataConfig::Folder {
                        root,
                        height,
                        width,
                        grayscale,
                    }),
                    Some(root) => {
                        f.errors
                            .push(format!("data.folder: {} is not a directory", root.display()));
                        None
                    }
                    None => {
                        f.errors.push("data.folder: required for data.source = folder".into());
                        None
                    }
                }
            }
            "synth" => Some(DataConfig::Synth {
                k: f.parse("data.k", 3),
                per_cluster: f.parse("data.per_cluster", 100),
                dim: f.parse("data.dim", 64),
                separation: f.parse("data.separation", 10.0),
                noise_sigma: f.parse("data.noise_sigma", 1.0),
                seed: f.parse("data.seed", seed),
            }),
            other => {
                f.errors
                    .push(format!("data.source: expected idx, folder or synth, got `{other}`"));
                None
            }
        };
        let limit = f.optional("data.limit");

        let variant = match raw.get("model.variant").unwrap_or("mlp") {
            "mlp" | "mlp_dvc2" => Variant::MlpDvc2,
            "conv" | "conv_dvc1" => Variant::ConvDvc1,
            other => {
                f.errors
                    .push(format!("model.variant: expected mlp or conv, got `{other}`"));
                Variant::MlpDvc2
            }
        };
        let arch = ArchConfig {
            variant,
            latent_dim: f.parse("model.latent_dim", DEFAULT_LATENT_DIM),
            mlp_dims: f.list("model.mlp_dims"),
            conv_channels: f.list("model.conv_channels"),
        };

        let d = TrainSchedule::default();
        let schedule = TrainSchedule {
            lambda: f.parse("schedule.lambda", d.lambda),
            delta: f.parse("schedule.delta", d.delta),
            update_interval: f.parse("schedule.update_interval", d.update_interval),
            batch_size: f.parse("schedule.batch_size", d.batch_size),
            base_lr: f.parse("schedule.base_lr", d.base_lr),
            lr_decay_every: f.parse("schedule.lr_decay_every", d.lr_decay_every),
            lr_decay_factor: f.parse("schedule.lr_decay_factor", d.lr_decay_factor),
            max_iterations: f.parse("schedule.max_iterations", d.max_iterations),
            pretrain_iterations: f.parse("schedule.pretrain_iterations", d.pretrain_iterations),
            seed,
            weight_decay: f.parse("schedule.weight_decay", d.weight_decay),
            momentum: f.parse("schedule.momentum", d.momentum),
            alpha: f.parse("schedule.alpha", d.alpha),
            gamma: f.parse("schedule.gamma", d.gamma),
            target: f.parse("schedule.target", d.target),
            kmeans_restarts: f.parse("schedule.kmeans_restarts", d.kmeans_restarts),
            pretrain_mode: f.parse("schedule.pretrain_mode", d.pretrain_mode),
            layerwise_iterations: f.parse("schedule.layerwise_iterations", d.layerwise_iterations),
            dropout: f.parse("schedule.dropout", d.dropout),
            clustering_gradient: f.parse("schedule.clustering_gradient", d.clustering_gradient),
        };
        if let Err(e) = schedule.validate() {
            f.errors.push(format!("schedule: {e}"));
        }
        let k = f.parse("cluster.k", 10usize);
        if k < 2 {
            f.errors.push(format!("cluster.k: must be at least 2, got {k}"));
        }
        let run_name = raw.get("run.name").map(str::to_string);

        match data {
            Some(data) if f.errors.is_empty() => Ok(Self {
                run_name,
                data,
                limit,
                arch,
                schedule,
                k,
                output_dir,
                seed,
            }),
            _ => Err(CliError::Usage(f.errors.join("\n"))),
        }
    }

    pub fn dataset_label(&self) -> String {
        match &self.data {
            DataConfig::Idx { images, .. } => images
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "idx".into()),
            DataConfig::Folder { root, .. } => root
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "folder".into()),
            DataConfig::Synth { .. } => "synth_blobs".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dvc_core::TargetVariant;

    #[test]
    fn flat_and_sectioned_keys_agree() {
        let flat = RawConfig::parse("schedule.lambda = 0.2\nmodel.mlp_dims = [64, 32]\ncluster.k = 3\n").unwrap();
        let sectioned =
            RawConfig::parse("[schedule]\nlambda = 0.2\n[model]\nmlp_dims = \"64,32\"\n[cluster]\nk = 3\n").unwrap();
        assert_eq!(flat, sectioned);
        let cfg = RunConfig::from_raw(&flat).unwrap();
        assert_eq!(cfg.schedule.lambda, 0.2);
        assert_eq!(cfg.arch.mlp_dims, Some(vec![64, 32]));
        assert_eq!(cfg.k, 3);
    }

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::from_raw(&RawConfig::default()).unwrap();
        assert_eq!(cfg.schedule, TrainSchedule::default());
        assert_eq!(cfg.schedule.target, TargetVariant::DvcModified);
        assert!(matches!(cfg.data, DataConfig::Synth { k: 3, .. }));
    }

    #[test]
    fn all_errors_reported_together() {
        let mut raw = RawConfig::default();
        raw.set("schedule.lambda", "abc");
        raw.set("cluster.k", "1");
        raw.set("model.variant", "rnn");
        let CliError::Usage(msg) = RunConfig::from_raw(&raw).unwrap_err() else {
            panic!("expected usage error");
        };
        for key in ["schedule.lambda", "cluster.k", "model.variant"] {
            assert!(msg.contains(key), "{msg}");
        }
    }

    #[test]
    fn unknown_key_and_missing_path() {
        assert!(RawConfig::parse("schedule.lamda = 0.1").is_err());
        let mut raw = RawConfig::default();
        raw.set("data.images", "/definitely/not/here.gz");
        assert!(matches!(RunConfig::from_raw(&raw), Err(CliError::Usage(_))));
    }
}
