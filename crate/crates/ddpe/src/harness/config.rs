//! Experiment configuration: one TOML file describes data, network,
//! training, perturbation, and protocol.

use super::{SwaConfig, TrainConfig};
use crate::data::{generate_synthetic_domains, load_image_folder, DomainSample, SamplerKind, SyntheticSpec};
use crate::dynconv::{BlockConfig, NetworkConfig};
use crate::error::{bail, Result};
use crate::perturb::PerturbationPlan;
use crate::rng::{derive, STREAM_DATA};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// dataset root for `kind = "folder"`
    pub root: Option<PathBuf>,
    pub seed: u64,
    pub classes: usize,
    pub domains: usize,
    pub per_cell: usize,
    pub size: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        DataConfig {
            kind: DataKind::Synthetic,
            root: None,
            seed: 0,
            classes: spec.classes,
            domains: spec.domains,
            per_cell: spec.per_cell,
            size: spec.size,
            noise: spec.noise,
        }
    }
}

impl DataConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            domains: self.domains,
            per_cell: self.per_cell,
            size: self.size,
            noise: self.noise,
        }
    }

    pub fn load(&self) -> Result<Vec<DomainSample>> {
        match self.kind {
            DataKind::Synthetic => {
                generate_synthetic_domains(&self.synthetic_spec(), derive(self.seed, STREAM_DATA))
            }
            DataKind::Folder => {
                let root = self
                    .root
                    .as_ref()
                    .ok_or_else(|| crate::error::err_fmt!(Config, "folder data needs `root`"))?;
                load_image_folder(root)
            }
        }
    }
}

/// Compact network description, expanded to a [`NetworkConfig`] once the
/// data geometry is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkShape {
    /// output channels per block
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub templates: usize,
    /// 0 disables the hidden adjuster layer
    pub adjuster_hidden: usize,
}

impl Default for NetworkShape {
    fn default() -> Self {
        NetworkShape {
            channels: vec![8, 16],
            kernel: 3,
            templates: 4,
            adjuster_hidden: 0,
        }
    }
}

impl NetworkShape {
    pub fn to_network_config(
        &self,
        input_channels: usize,
        input_height: usize,
        input_width: usize,
        classes: usize,
    ) -> Result<NetworkConfig> {
        if self.channels.is_empty() {
            bail!(Config, "network needs at least one block");
        }
        let mut blocks = Vec::with_capacity(self.channels.len());
        let mut c_in = input_channels;
        for &c_out in &self.channels {
            blocks.push(BlockConfig {
                c_in,
                c_out,
                k: self.kernel,
                templates: self.templates,
                stride: 1,
                pad: self.kernel / 2,
            });
            c_in = c_out;
        }
        let cfg = NetworkConfig {
            input_channels,
            input_height,
            input_width,
            classes,
            blocks,
            adjuster_hidden: (self.adjuster_hidden > 0).then_some(self.adjuster_hidden),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Training settings shared across the seeds of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sampler: SamplerKind,
    pub seeds: Vec<u64>,
    pub swa: SwaConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 50,
            batch_size: 64,
            lr0: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            sampler: SamplerKind::Shuffle,
            seeds: vec![0, 1, 2],
            swa: SwaConfig::default(),
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(&self, plan: &PerturbationPlan, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            swa: self.swa,
            plan: plan.clone(),
            sampler: self.sampler,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProtocolConfig {
    /// evaluate one target, or every domain in turn when unset
    LeaveOneOut {
        #[serde(default)]
        target: Option<usize>,
    },
    SingleSource { source: usize },
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig::LeaveOneOut { target: None }
    }
}

/// The full experiment description, parsed verbatim from TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub network: NetworkShape,
    pub train: TrainSettings,
    pub perturb: PerturbationPlan,
    pub protocol: ProtocolConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| crate::error::err_fmt!(Config, "config parse failure: {e}"))?;
        if cfg.train.seeds.is_empty() {
            bail!(Config, "at least one seed is required");
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serializes")
    }
}
