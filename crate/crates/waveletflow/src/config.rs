//! Run configuration: one JSON file describing the model architecture, the
//! training hyperparameters, the sampler, and the dataset/checkpoint paths.
//! Per-level knobs are arrays of length n+1 indexed by level (0 = base).

use crate::flow::CouplingKind;
use crate::mcmc::{AnnealSpec, NutsConfig};
use crate::model::LevelSpec;
use crate::train::TrainConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n: usize,
    pub channels: usize,
    #[serde(default)]
    pub steps: Option<Vec<usize>>,
    #[serde(default)]
    pub conv_channels: Option<Vec<usize>>,
    #[serde(default)]
    pub residual_blocks: Option<Vec<usize>>,
    #[serde(default)]
    pub coupling_kind: Option<Vec<String>>,
    #[serde(default)]
    pub patch_size: Option<Vec<usize>>,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    20
}
fn default_patience() -> usize {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> TrainSection {
        TrainSection {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            early_stop_patience: default_patience(),
            seed: None,
        }
    }
}

fn default_temperature() -> f64 {
    0.97
}
fn default_min_steps() -> usize {
    30
}
fn default_adapt_steps() -> usize {
    10
}
fn default_target_accept() -> f64 {
    0.8
}
fn default_max_tree_depth() -> usize {
    10
}
fn default_initial_step_size() -> f64 {
    0.1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(rename = "T", default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_min_steps")]
    pub min_steps: usize,
    #[serde(default = "default_adapt_steps")]
    pub adapt_steps: usize,
    #[serde(default = "default_target_accept")]
    pub target_accept: f64,
    #[serde(default = "default_max_tree_depth")]
    pub max_tree_depth: usize,
    #[serde(default = "default_initial_step_size")]
    pub initial_step_size: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for SampleSection {
    fn default() -> SampleSection {
        SampleSection {
            temperature: default_temperature(),
            min_steps: default_min_steps(),
            adapt_steps: default_adapt_steps(),
            target_accept: default_target_accept(),
            max_tree_depth: default_max_tree_depth(),
            initial_step_size: default_initial_step_size(),
            seed: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default)]
    pub train_dir: Option<String>,
    #[serde(default)]
    pub val_dir: Option<String>,
    #[serde(default)]
    pub checkpoint_dir: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let s = std::fs::read_to_string(path)?;
        RunConfig::from_str(&s)
    }

    /// Native extent of level i's coefficient plane: 1 for the base,
    /// 2^(i-1) for detail levels.
    fn level_extent(i: usize) -> usize {
        if i == 0 {
            1
        } else {
            1usize << (i - 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let len = m.n + 1;
        if m.channels != 1 && m.channels != 3 {
            return Err(Error::Config(format!(
                "channels must be 1 (grayscale) or 3 (color), got {}",
                m.channels
            )));
        }
        let check = |name: &str, v: &Option<Vec<usize>>| -> Result<()> {
            if let Some(v) = v {
                if v.len() != len {
                    return Err(Error::Config(format!(
                        "model.{name} has {} entries, want n+1 = {len}",
                        v.len()
                    )));
                }
            }
            Ok(())
        };
        check("steps", &m.steps)?;
        check("conv_channels", &m.conv_channels)?;
        check("residual_blocks", &m.residual_blocks)?;
        check("patch_size", &m.patch_size)?;
        if let Some(kinds) = &m.coupling_kind {
            if kinds.len() != len {
                return Err(Error::Config(format!(
                    "model.coupling_kind has {} entries, want n+1 = {len}",
                    kinds.len()
                )));
            }
            for k in kinds {
                CouplingKind::parse(k)?;
            }
        }
        for (i, &p) in self.patch_sizes().iter().enumerate() {
            let extent = Self::level_extent(i);
            if p == 0 || p > extent || extent % p != 0 {
                return Err(Error::Config(format!(
                    "model.patch_size[{i}] = {p} does not divide the level extent {extent}"
                )));
            }
        }
        if !(self.sample.temperature > 0.0 && self.sample.temperature <= 1.0) {
            return Err(Error::Config(format!(
                "sample.T must lie in (0, 1], got {}",
                self.sample.temperature
            )));
        }
        Ok(())
    }

    pub fn level_specs(&self) -> Result<Vec<LevelSpec>> {
        let len = self.model.n + 1;
        let mut specs = Vec::with_capacity(len);
        for i in 0..len {
            let d = LevelSpec::default();
            specs.push(LevelSpec {
                steps: self.model.steps.as_ref().map_or(d.steps, |v| v[i]),
                conv_channels: self.model.conv_channels.as_ref().map_or(d.conv_channels, |v| v[i]),
                residual_blocks: self
                    .model
                    .residual_blocks
                    .as_ref()
                    .map_or(d.residual_blocks, |v| v[i]),
                coupling: match &self.model.coupling_kind {
                    Some(v) => CouplingKind::parse(&v[i])?,
                    None => d.coupling,
                },
            });
        }
        Ok(specs)
    }

    /// Patch size per level; defaults to the level's full extent.
    pub fn patch_sizes(&self) -> Vec<usize> {
        match &self.model.patch_size {
            Some(v) => v.clone(),
            None => (0..=self.model.n).map(Self::level_extent).collect(),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            early_stop_patience: self.train.early_stop_patience,
            seed,
        }
    }

    pub fn nuts_config(&self, seed: u64) -> NutsConfig {
        NutsConfig {
            min_steps: self.sample.min_steps,
            adapt_steps: self.sample.adapt_steps,
            target_accept: self.sample.target_accept,
            max_tree_depth: self.sample.max_tree_depth,
            initial_step_size: self.sample.initial_step_size,
            seed,
        }
    }

    pub fn anneal(&self) -> Result<AnnealSpec> {
        AnnealSpec::new(self.sample.temperature)
    }
}

/// Seed precedence: command line, then config file, then the
/// `WAVELETFLOW_SEED` environment variable, then 0.
pub fn resolve_seed(cli: Option<u64>, config: Option<u64>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = cli {
        return Ok(s);
    }
    if let Some(s) = config {
        return Ok(s);
    }
    if let Some(s) = env {
        return s
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::Config(format!("WAVELETFLOW_SEED is not an integer: {s:?}")));
    }
    Ok(0)
}
