//! Run configuration: a TOML file whose values command-line flags override.

use std::path::Path;

use anyhow::{Context, Result};
use introseg::bench::BenchConfig;
use introseg::data::SynthConfig;
use introseg::infer::InferOptions;
use introseg::model::ModelConfig;
use introseg::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every random stream (data, split, init, training, bench input)
    /// when set.
    pub seed: Option<u64>,
    /// Fraction of frames, by whole series, held out for validation when the
    /// manifest carries no split tags.
    pub val_fraction: Option<f64>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferOptions,
    pub bench: BenchConfig,
}

pub const DEFAULT_VAL_FRACTION: f64 = 0.25;

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Pushes the top-level seed into every section.
    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.train.seed = s;
            self.bench.seed = s;
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn val_fraction(&self) -> f64 {
        self.val_fraction.unwrap_or(DEFAULT_VAL_FRACTION)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
