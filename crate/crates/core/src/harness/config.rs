use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::gating::GateConfig;
use crate::model::Topology;

pub const PRESET_NAMES: [&str; 3] = ["aggressive", "balanced", "conservative"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn topology(self) -> Topology {
        match self {
            DatasetKind::Mnist => Topology::mnist(),
            DatasetKind::Cifar10 => Topology::cifar(),
        }
    }

    pub fn augment(self) -> AugmentConfig {
        match self {
            DatasetKind::Mnist => AugmentConfig::mnist(),
            DatasetKind::Cifar10 => AugmentConfig::cifar(),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" | "cifar" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset `{other}` (expected mnist or cifar10)"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

/// Everything that defines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub name: String,
    pub lambda_flops: f64,
    pub lambda_cons: f64,
    pub tau_target: f64,
    pub gamma0: f64,
    pub learnable_gamma: bool,
    pub epochs: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub temperature_final: Option<f64>,
    pub threshold: f64,
    pub eps_norm: f64,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub subset_train: Option<usize>,
    pub subset_test: Option<usize>,
}

impl TrainConfig {
    fn base(name: &str, lambda_flops: f64, lambda_cons: f64, tau_target: f64, gamma0: f64) -> Self {
        TrainConfig {
            name: name.to_string(),
            lambda_flops,
            lambda_cons,
            tau_target,
            gamma0,
            learnable_gamma: true,
            epochs: 160,
            warmup: 40,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            temperature: 1.0,
            temperature_final: None,
            threshold: 0.45,
            eps_norm: 1e-8,
            seed: 0,
            dataset: DatasetKind::Cifar10,
            subset_train: None,
            subset_test: None,
        }
    }

    pub fn aggressive() -> Self {
        Self::base("aggressive", 5.0, 0.01, 0.60, -3.0)
    }

    pub fn balanced() -> Self {
        Self::base("balanced", 3.0, 0.01, 0.70, -2.5)
    }

    pub fn conservative() -> Self {
        Self::base("conservative", 2.5, 0.05, 0.72, -2.0)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "aggressive" => Ok(Self::aggressive()),
            "balanced" => Ok(Self::balanced()),
            "conservative" => Ok(Self::conservative()),
            _ => Err(Error::UnknownPreset {
                name: name.to_string(),
                valid: PRESET_NAMES.join(", "),
            }),
        }
    }

    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            gamma0: self.gamma0,
            learnable_gamma: self.learnable_gamma,
            temperature: self.temperature,
            temperature_final: self.temperature_final,
            threshold: self.threshold,
            eps_norm: self.eps_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gate_config().validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        if !(self.tau_target > 0.0 && self.tau_target <= 1.0) {
            return Err(Error::Config(format!("tau_target must lie in (0, 1], got {}", self.tau_target)));
        }
        if self.lambda_flops < 0.0 || self.lambda_cons < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}
