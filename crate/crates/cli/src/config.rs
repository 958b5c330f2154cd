//! Run configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bitweight_core::data::{
    load_cifar_with, load_mnist_with, template_dataset, AugmentConfig, CifarFiles, CifarVariant, Dataset, MnistFiles,
    Split,
};
use bitweight_core::train::{TrainConfig, LR_MAX, LR_MIN, MOMENTUM, WEIGHT_DECAY};
use bitweight_core::NetworkConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Mode {
    #[serde(rename = "full")]
    #[value(name = "full")]
    Full,
    #[serde(rename = "1bit")]
    #[value(name = "1bit")]
    OneBit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub blocks_per_scale: usize,
    pub width: usize,
    pub input_relu: bool,
    pub skip_connections: bool,
    pub full_precision_layers: Vec<usize>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            blocks_per_scale: 3,
            width: 1,
            input_relu: false,
            skip_connections: true,
            full_precision_layers: vec![],
        }
    }
}

/// Parameters of the built-in noisy-template dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub train_count: usize,
    pub test_count: usize,
    pub classes: usize,
    pub image_dims: [usize; 3],
    pub noise: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            train_count: 500,
            test_count: 500,
            classes: 2,
            image_dims: [1, 8, 8],
            noise: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetName,
    pub data_dir: Option<PathBuf>,
    pub mnist_files: MnistFiles,
    pub cifar_files: Option<CifarFiles>,
    pub synthetic: SyntheticSection,
    /// Use only the first `n` training / test images.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub out_dir: PathBuf,
    pub mode: Mode,
    pub seed: u64,
    pub threads: Option<usize>,
    pub network: NetworkSection,
    /// Explicit augmentation; the dataset default applies when absent.
    pub augment: Option<AugmentConfig>,
    pub cutout: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eval_batch_size: usize,
    pub eval_every_epoch: bool,
    pub recompute_moments: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetName::Mnist,
            data_dir: None,
            mnist_files: MnistFiles::default(),
            cifar_files: None,
            synthetic: SyntheticSection::default(),
            train_limit: None,
            test_limit: None,
            out_dir: PathBuf::from("runs/default"),
            mode: Mode::OneBit,
            seed: 0,
            threads: None,
            network: NetworkSection::default(),
            augment: None,
            cutout: false,
            epochs: 6,
            batch_size: 125,
            lr_max: LR_MAX,
            lr_min: LR_MIN,
            momentum: MOMENTUM,
            weight_decay: WEIGHT_DECAY,
            eval_batch_size: 500,
            eval_every_epoch: false,
            recompute_moments: true,
        }
    }
}

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.b1wc";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const PACKED_FILE: &str = "model.b1w";

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn image_dims(&self) -> [usize; 3] {
        match self.dataset {
            DatasetName::Mnist => [1, 28, 28],
            DatasetName::Cifar10 | DatasetName::Cifar100 => [3, 32, 32],
            DatasetName::Synthetic => self.synthetic.image_dims,
        }
    }

    pub fn class_count(&self) -> usize {
        match self.dataset {
            DatasetName::Mnist | DatasetName::Cifar10 => 10,
            DatasetName::Cifar100 => 100,
            DatasetName::Synthetic => self.synthetic.classes,
        }
    }

    pub fn network_config(&self) -> NetworkConfig {
        let n = &self.network;
        NetworkConfig {
            blocks_per_scale: n.blocks_per_scale,
            width: n.width,
            num_classes: self.class_count(),
            input_channels: self.image_dims()[0],
            binarized: self.mode == Mode::OneBit,
            input_relu: n.input_relu,
            skip_connections: n.skip_connections,
            full_precision_layers: n.full_precision_layers.clone(),
            seed: self.seed,
        }
    }

    /// Explicit augmentation if given, else flip + random-value pad-crop for
    /// CIFAR (plus 18×18 cutout when enabled) and nothing otherwise.
    pub fn augmentation(&self) -> Option<AugmentConfig> {
        if let Some(a) = &self.augment {
            return Some(a.clone());
        }
        match self.dataset {
            DatasetName::Cifar10 | DatasetName::Cifar100 => Some(AugmentConfig::cifar(self.cutout, self.seed)),
            _ if self.cutout => Some(AugmentConfig {
                cutout_size: 18,
                ..AugmentConfig::none()
            }),
            _ => None,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            augment: self.augmentation(),
            seed: self.seed,
            eval_batch_size: self.eval_batch_size,
            eval_every_epoch: self.eval_every_epoch,
            recompute_moments: self.recompute_moments,
            log_path: Some(self.out_dir.join(LOG_FILE)),
            checkpoint_path: Some(self.out_dir.join(CHECKPOINT_FILE)),
        }
    }

    pub fn load_split(&self, split: Split) -> Result<Dataset> {
        let ds = match self.dataset {
            DatasetName::Synthetic => {
                let s = &self.synthetic;
                let count = if split == Split::Train {
                    s.train_count
                } else {
                    s.test_count
                };
                template_dataset(count, s.classes, s.image_dims, s.noise, self.seed, split)?
            }
            other => {
                let Some(dir) = &self.data_dir else {
                    bail!("no data directory: pass --data-dir or set BITWEIGHT_DATA_DIR");
                };
                match other {
                    DatasetName::Mnist => load_mnist_with(dir, split, &self.mnist_files),
                    DatasetName::Cifar10 | DatasetName::Cifar100 => {
                        let v = if other == DatasetName::Cifar10 {
                            CifarVariant::C10
                        } else {
                            CifarVariant::C100
                        };
                        let files = self.cifar_files.clone().unwrap_or_else(|| CifarFiles::standard(v));
                        load_cifar_with(dir, v, split, &files)
                    }
                    DatasetName::Synthetic => unreachable!(),
                }
                .with_context(|| format!("loading {other:?} {split:?} split from {}", dir.display()))?
            }
        };
        let limit = if split == Split::Train {
            self.train_limit
        } else {
            self.test_limit
        };
        Ok(match limit {
            Some(n) => ds.take(n),
            None => ds,
        })
    }
}
