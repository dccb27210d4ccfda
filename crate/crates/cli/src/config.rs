//! Run configuration files and dataset specifications.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use adr_core::data::{load_cifar10_bin, load_mnist_idx, synth_blobs, Dataset};
use adr_core::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Where a dataset comes from, optionally restricted to `offset..offset+limit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        offset: usize,
        #[serde(default)]
        limit: Option<usize>,
    },
    Cifar10 {
        files: Vec<PathBuf>,
        #[serde(default)]
        offset: usize,
        #[serde(default)]
        limit: Option<usize>,
    },
    Blobs {
        seed: u64,
        classes: usize,
        per_class: usize,
        shape: [usize; 3],
    },
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset, CliError> {
        let (ds, offset, limit) = match self {
            DatasetConfig::Mnist {
                images,
                labels,
                offset,
                limit,
            } => {
                for p in [images, labels] {
                    if !p.exists() {
                        return Err(CliError::Config(format!("dataset file {} does not exist", p.display())));
                    }
                }
                (load_mnist_idx(images, labels)?, *offset, *limit)
            }
            DatasetConfig::Cifar10 { files, offset, limit } => {
                if files.is_empty() {
                    return Err(CliError::Config("cifar10 dataset lists no files".into()));
                }
                if let Some(p) = files.iter().find(|p| !p.exists()) {
                    return Err(CliError::Config(format!("dataset file {} does not exist", p.display())));
                }
                (load_cifar10_bin(files)?, *offset, *limit)
            }
            DatasetConfig::Blobs {
                seed,
                classes,
                per_class,
                shape,
            } => (synth_blobs(*seed, *classes, *per_class, *shape)?, 0, None),
        };
        if offset > ds.len() {
            return Err(CliError::Config(format!("offset {offset} beyond {} examples", ds.len())));
        }
        let end = limit.map_or(ds.len(), |l| (offset + l).min(ds.len()));
        Ok(if offset == 0 && end == ds.len() { ds } else { ds.slice(offset, end) })
    }
}

/// Command-line dataset shorthand.
///
/// * `mnist:IMAGES,LABELS`
/// * `cifar10:FILE[,FILE...]`
/// * `blobs:SEED,CLASSES,PER_CLASS,CxHxW`
/// * an inline JSON object in the config-file format
impl FromStr for DatasetConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim_start().starts_with('{') {
            return serde_json::from_str(s).map_err(|e| format!("invalid dataset JSON: {e}"));
        }
        let (kind, rest) = s.split_once(':').ok_or_else(|| format!("expected KIND:ARGS, got '{s}'"))?;
        let parts: Vec<&str> = rest.split(',').collect();
        match kind {
            "mnist" => match parts.as_slice() {
                [images, labels] => Ok(DatasetConfig::Mnist {
                    images: images.into(),
                    labels: labels.into(),
                    offset: 0,
                    limit: None,
                }),
                _ => Err("mnist expects IMAGES,LABELS".into()),
            },
            "cifar10" => Ok(DatasetConfig::Cifar10 {
                files: parts.iter().map(PathBuf::from).collect(),
                offset: 0,
                limit: None,
            }),
            "blobs" => match parts.as_slice() {
                [seed, classes, per_class, shape] => {
                    let num = |v: &str| v.parse::<usize>().map_err(|e| format!("'{v}': {e}"));
                    let dims: Vec<usize> = shape.split('x').map(num).collect::<Result<_, _>>()?;
                    let shape: [usize; 3] = dims.try_into().map_err(|_| "shape must be CxHxW".to_string())?;
                    Ok(DatasetConfig::Blobs {
                        seed: seed.parse().map_err(|e| format!("seed: {e}"))?,
                        classes: num(classes)?,
                        per_class: num(per_class)?,
                        shape,
                    })
                }
                _ => Err("blobs expects SEED,CLASSES,PER_CLASS,CxHxW".into()),
            },
            other => Err(format!("unknown dataset kind '{other}'")),
        }
    }
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    /// Training data; the validation split is carved out of it.
    pub dataset: DatasetConfig,
    /// Held-out data evaluated once at the end of training.
    #[serde(default)]
    pub test_dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            CliError::Config(format!(
                "{origin}:{}:{}: at '{path}': {inner}",
                inner.line(),
                inner.column()
            ))
        })?;
        if cfg.config_version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "{origin}: config_version {} is not supported (expected {CONFIG_VERSION})",
                cfg.config_version
            )));
        }
        cfg.train
            .validate()
            .map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shorthand_specs() {
        let d: DatasetConfig = "blobs:3,4,10,1x8x8".parse().unwrap();
        assert_eq!(
            d,
            DatasetConfig::Blobs {
                seed: 3,
                classes: 4,
                per_class: 10,
                shape: [1, 8, 8]
            }
        );
        assert!("mnist:a".parse::<DatasetConfig>().is_err());
        assert!("svhn:a".parse::<DatasetConfig>().is_err());
        let j: DatasetConfig = r#"{"kind":"mnist","images":"i","labels":"l","limit":5}"#.parse().unwrap();
        assert!(matches!(j, DatasetConfig::Mnist { limit: Some(5), .. }));
    }

    #[test]
    fn unknown_keys_are_located() {
        let text = r#"{
  "config_version": 1,
  "dataset": {"kind": "blobs", "seed": 0, "classes": 2, "per_class": 4, "shape": [1, 4, 4]},
  "train": {"model": {"kind": {"type": "small_conv"}, "input_shape": [1, 4, 4], "num_classes": 2},
            "epochs": 1, "learning_rate": 0.1}
}"#;
        match RunConfig::from_json(text, "cfg.json") {
            Err(CliError::Config(msg)) => {
                assert!(msg.starts_with("cfg.json:5:"), "{msg}");
                assert!(msg.contains("learning_rate"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }
}
