//! Config-file sections. Every field is optional; a flag beats the file, the
//! file beats the built-in default.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub pnc: PncSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub verify: VerifySection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub seed: Option<u64>,
    pub train_size: Option<usize>,
    pub val_size: Option<usize>,
    pub eval_size: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<String>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PncSection {
    pub layers: Option<Vec<usize>>,
    pub ensemble_size: Option<usize>,
    pub rank: Option<usize>,
    pub scale: Option<f64>,
    pub ridge: Option<f64>,
    pub bootstrap_fraction: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub sigmas: Option<Vec<f64>>,
    pub fractions: Option<Vec<f64>>,
    pub ridges: Option<Vec<f64>>,
    pub include_baseline: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub suite: Option<String>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).context("invalid config file")
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text)
            }
        }
    }
}

/// First present value wins.
pub fn pick<T: Clone>(flag: Option<T>, file: &Option<T>, default: T) -> T {
    flag.or_else(|| file.clone()).unwrap_or(default)
}
