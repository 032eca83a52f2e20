//! Run configuration and its canonical hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tclab_core::learn::TrainConfig;
use tclab_core::nets::ArchConfig;
use tclab_core::sampler::{SamplerConfig, Selector};
use tclab_core::worlds::{SyntheticWorld, WorldSpec};

use crate::error::{io_err, CliError, CliResult};

/// Grid of the quality/diversity sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub temperature_intercepts: Vec<f64>,
    pub noise_scales: Vec<f64>,
    pub steps: Vec<usize>,
    pub selectors: Vec<Selector>,
    pub samples: usize,
    pub class: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            temperature_intercepts: vec![0.25, 0.5, 1.0],
            noise_scales: vec![0.0, 1.0, 2.0],
            steps: vec![6],
            selectors: vec![Selector::Critic, Selector::Confidence],
            samples: 10_000,
            class: 0,
        }
    }
}

/// Critic at `steps` against the confidence baseline at twice as many.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub seeds: usize,
    pub samples: usize,
    pub steps: usize,
    pub class: usize,
    /// Adds an exact-sampler row per seed.
    pub oracle_row: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            seeds: 5,
            samples: 100_000,
            steps: 6,
            class: 0,
            oracle_row: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub generator: ArchConfig,
    pub critic: ArchConfig,
    pub train_generator: TrainConfig,
    pub train_critic: TrainConfig,
    /// Its `seed` is replaced by the run seed.
    pub sampler: SamplerConfig,
    pub sweep: SweepGrid,
    pub compare: CompareConfig,
    /// Not part of the hash.
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldSpec::patterns(),
            generator: ArchConfig::generator_default(),
            critic: ArchConfig::critic_default(),
            train_generator: TrainConfig::default(),
            train_critic: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            sweep: SweepGrid::default(),
            compare: CompareConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Sorted keys, shortest round-trip floats, no whitespace; the output
    /// directory is left out.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        value.to_string()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Checks every section; the world is built here.
    pub fn validate(&self) -> CliResult<SyntheticWorld> {
        let world = SyntheticWorld::new(self.world.clone())?;
        for (name, arch) in [("generator", &self.generator), ("critic", &self.critic)] {
            if arch.embed_dim == 0 || arch.heads == 0 || arch.embed_dim % arch.heads != 0 {
                return Err(CliError::Config(format!("{name}: embed_dim must be a positive multiple of heads")));
            }
        }
        self.train_generator.validate()?;
        self.train_critic.validate()?;
        self.sampler.schedule.validate()?;
        if self.sweep.class >= world.num_classes() || self.compare.class >= world.num_classes() {
            return Err(CliError::Config(format!("class must be below {}", world.num_classes())));
        }
        if self.compare.steps == 0 || self.sweep.steps.contains(&0) {
            return Err(CliError::Config("steps must be at least 1".into()));
        }
        Ok(world)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_output_dir_and_key_order() {
        let a = RunConfig::default();
        let b = RunConfig {
            output_dir: PathBuf::from("elsewhere"),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());

        let back = RunConfig::from_json(&a.canonical_json()).unwrap();
        assert_eq!(back.hash(), a.hash());
        let x = RunConfig::from_json(r#"{"seed": 4, "compare": {"seeds": 2, "steps": 3}}"#).unwrap();
        let y = RunConfig::from_json(r#"{"compare": {"steps": 3, "seeds": 2}, "seed": 4}"#).unwrap();
        assert_eq!(x.hash(), y.hash());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 3, "compare": {"seeds": 1}}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.compare.seeds, 1);
        assert_eq!(cfg.compare.samples, CompareConfig::default().samples);
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let err = RunConfig::from_json(r#"{"sede": 3}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
