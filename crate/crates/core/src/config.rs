//! Run configuration: a TOML file with one section per stage, overridable by
//! `WF_<SECTION>_<KEY>` environment variables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Arch, ModelConfig};
use crate::raster::NUM_CHANNELS;
use crate::sampler::{SamplerConfig, Split, Task};
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

pub const ENV_PREFIX: &str = "WF_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// When set, replaces every stage's `rng_seed`.
    pub seed: Option<u64>,
    pub task: Task,
    pub arch: Arch,
    pub threshold: f64,
    /// Working directory; stage outputs go to subdirectories.
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: None,
            task: Task::Daily,
            arch: Arch::Autoencoder,
            threshold: 0.5,
            out: PathBuf::from("run"),
        }
    }
}

/// Input locations. Unset entries default to the matching subdirectory of
/// `run.out`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub scenes: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub filter_scheme: Vec<usize>,
    pub lstm_hidden: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            filter_scheme: vec![16, 32, 64],
            lstm_hidden: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
    /// Write probability and label PGMs for the first `pgm_tiles` samples.
    pub pgm_tiles: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: Split::Test,
            pgm_tiles: 0,
        }
    }
}

/// Value lists for the `sweep` verb. Empty lists keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub arch: Vec<Arch>,
    pub learning_rate: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub positive_weight: Vec<f64>,
    pub filter_scheme: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub paths: PathsSection,
    pub synth: SynthConfig,
    pub sampler: SamplerConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads `path` (or starts from defaults), then applies environment
    /// overrides.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        apply_env(&mut table, std::env::vars())?;
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Copies `run.seed`, when set, into every stage seed.
    pub fn resolved(mut self) -> RunConfig {
        if let Some(seed) = self.run.seed {
            self.synth.rng_seed = seed;
            self.sampler.rng_seed = seed;
            self.train.rng_seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.sampler.validate()?;
        self.train.validate()?;
        self.model_config(self.run.arch).validate()?;
        if !(0.0..=1.0).contains(&self.run.threshold) {
            return Err(Error::InvalidConfig(format!(
                "threshold {} outside [0, 1]",
                self.run.threshold
            )));
        }
        if self.synth.height < self.sampler.tile_size || self.synth.width < self.sampler.tile_size {
            return Err(Error::InvalidConfig(format!(
                "synthetic grid {}x{} smaller than tile {}",
                self.synth.height, self.synth.width, self.sampler.tile_size
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            filter_scheme: self.model.filter_scheme.clone(),
            in_channels: NUM_CHANNELS,
            tile: self.sampler.tile_size,
            lstm_hidden: self.model.lstm_hidden,
        }
    }

    pub fn scenes_dir(&self) -> PathBuf {
        self.paths.scenes.clone().unwrap_or_else(|| self.run.out.join("scenes"))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths
            .dataset
            .clone()
            .unwrap_or_else(|| self.run.out.join("dataset"))
    }

    pub fn model_dir(&self) -> PathBuf {
        self.paths.model.clone().unwrap_or_else(|| self.run.out.join("model"))
    }
}

/// Applies `WF_<SECTION>_<KEY>=value` pairs. Section and key are matched
/// case-insensitively against the known schema; values are parsed as TOML
/// and fall back to a plain string.
pub fn apply_env(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let schema = toml::Table::try_from(RunConfig::default()).expect("default serializes");
    let mut known: BTreeMap<String, (String, String)> = BTreeMap::new();
    for (section, body) in &schema {
        if let toml::Value::Table(fields) = body {
            for key in fields.keys() {
                known.insert(
                    format!("{section}_{key}").to_uppercase(),
                    (section.clone(), key.clone()),
                );
            }
        }
    }
    // Optional fields are absent from the serialized defaults.
    for (section, key) in [
        ("run", "seed"),
        ("paths", "scenes"),
        ("paths", "dataset"),
        ("paths", "model"),
        ("model", "lstm_hidden"),
    ] {
        known.insert(format!("{section}_{key}").to_uppercase(), (section.into(), key.into()));
    }

    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let suffix = &name[ENV_PREFIX.len()..];
        if suffix == "LOG" {
            continue;
        }
        let (section, key) = known
            .get(suffix)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown override {name}")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let entry = table
            .entry(section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match entry {
            toml::Value::Table(t) => {
                t.insert(key.clone(), value);
            }
            _ => return Err(Error::InvalidConfig(format!("[{section}] is not a table"))),
        }
    }
    Ok(())
}
