//! One TOML file per experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::evaluator::{AblationConfig, AblationSpec};
use crate::fusion_net::NetworkConfig;
use crate::phantom::PhantomConfig;
use crate::trainer::{AugmentConfig, TrainConfig};
use crate::util::{atomic_write, hash_of};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Configuration names as printed in reports, e.g. `Seg(AS)+Ref(AS w/ MT)`.
    pub ablation: Vec<String>,
    /// Relative paths resolve against `paths.report_dir`.
    pub output_dir: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ablation: AblationSpec::table().0.iter().map(AblationConfig::name).collect(), output_dir: "ablation".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { dataset_root: "data".into(), checkpoint_dir: "checkpoints".into(), report_dir: "reports".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub phantom: PhantomConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    /// Desk-scale run: narrow network, 40 epochs on 64x64 crops of 96x96 stacks.
    pub fn desk() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            network: NetworkConfig::desk(),
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    /// Full-width network, 200 epochs, uncropped inputs.
    pub fn full() -> Self {
        Self { network: NetworkConfig::default(), train: TrainConfig::default(), ..Self::desk() }
    }

    /// Memorisation check: no augmentation, 200 epochs, meant for a handful of stacks.
    /// The larger step makes up for the few optimiser steps four stacks give.
    pub fn overfit() -> Self {
        let mut c = Self::desk();
        c.train.epochs = 200;
        c.train.learning_rate = 1e-3;
        c.train.augmentation =
            AugmentConfig { rotate_deg_max: 0.0, shift_frac_max: 0.0, flip_prob: 0.0, crop_size: c.phantom.image_size };
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "overfit" => Ok(Self::overfit()),
            other => Err(Error::InvalidConfig(format!("unknown preset {other:?} (desk, full, overfit)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.ablation()?;
        let (ch, cw) = self.train.augmentation.crop_size;
        let d = self.network.divisor();
        if ch % d != 0 || cw % d != 0 {
            return Err(Error::InvalidConfig(format!("crop {ch}x{cw} must be divisible by {d}")));
        }
        Ok(())
    }

    pub fn ablation(&self) -> Result<AblationSpec> {
        AblationSpec::from_names(&self.eval.ablation)
    }

    /// Hash of everything that affects results; output locations are left out.
    pub fn hash(&self) -> String {
        hash_of(&(&self.phantom, &self.network, &self.train, &self.eval.ablation))
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Parse a config file. Keys it sets override the preset named by its optional
    /// top-level `preset` key (`desk` when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let invalid = |e: &dyn std::fmt::Display| Error::InvalidConfig(e.to_string());
        let mut file: toml::Table = toml::from_str(text).map_err(|e| invalid(&e))?;
        let preset = match file.remove("preset") {
            None => "desk".to_string(),
            Some(toml::Value::String(s)) => s,
            Some(other) => return Err(Error::InvalidConfig(format!("preset must be a string, got {other}"))),
        };
        let mut base = toml::Table::try_from(Self::preset(&preset)?).map_err(|e| invalid(&e))?;
        merge(&mut base, file);
        let c: Self = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| invalid(&e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_toml().as_bytes())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_hash() {
        for c in [ExperimentConfig::desk(), ExperimentConfig::full(), ExperimentConfig::overfit()] {
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
        let mut moved = ExperimentConfig::desk();
        moved.paths.report_dir = "elsewhere".into();
        assert_eq!(moved.hash(), ExperimentConfig::desk().hash());
        let mut reseeded = ExperimentConfig::desk();
        reseeded.train.seed = 9;
        assert_ne!(reseeded.hash(), ExperimentConfig::desk().hash());
    }

    #[test]
    fn partial_files_take_defaults() {
        let c = ExperimentConfig::from_toml("[train]\nepochs = 3\nseed = 4\n").unwrap();
        assert_eq!((c.train.epochs, c.seed()), (3, 4));
        assert_eq!(c.network, NetworkConfig::desk());
        assert_eq!(c.train.augmentation.crop_size, (64, 64));
        let p = ExperimentConfig::from_toml("preset = \"full\"\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(p.network, NetworkConfig::default());
        assert!(ExperimentConfig::from_toml("preset = \"huge\"\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nepochs = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[eval]\nablation = [\"Seg(QQ)\"]\n").is_err());
    }
}
