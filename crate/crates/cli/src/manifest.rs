use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tsnode::systems::{IcSpreadReading, SystemSpec};
use tsnode::tsnode::{Profile, TrainConfig, Variant};

/// A benchmark named by string (`"lk"`) or spelled out in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemRef {
    Name(String),
    Spec(SystemSpec),
}

/// Experiment description as read from JSON. Everything but `system` is
/// optional; `train` holds overrides on top of the selected profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub system: SystemRef,
    #[serde(default)]
    pub ic_spread: Option<IcSpreadReading>,
    #[serde(default)]
    pub profile: Option<Profile>,
    #[serde(default)]
    pub train: Map<String, Value>,
    #[serde(default)]
    pub variants: Option<Vec<Variant>>,
    #[serde(default)]
    pub sigma_sweep: Vec<f64>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Command-line values that take precedence over the manifest.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
    pub out: Option<PathBuf>,
}

/// Fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentManifest {
    pub system: SystemSpec,
    pub profile: Profile,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub sigma_sweep: Vec<f64>,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

impl ExperimentManifest {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Self::from_json(&text, overrides).with_context(|| format!("manifest {}", path.display()))
    }

    pub fn from_json(text: &str, overrides: &Overrides) -> Result<Self> {
        let file: ManifestFile = serde_json::from_str(text)?;
        file.resolve(overrides)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.output_dir.join("runs")
    }

    /// Training configuration for one seed.
    pub fn config_for(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }
}

impl ManifestFile {
    pub fn resolve(self, overrides: &Overrides) -> Result<ExperimentManifest> {
        let mut system = match self.system {
            SystemRef::Name(name) => SystemSpec::by_name(&name)?,
            SystemRef::Spec(spec) => spec,
        };
        if let Some(reading) = self.ic_spread {
            system = system.with_ic_reading(reading);
        }
        system.validate()?;

        let profile = overrides.profile.or(self.profile).unwrap_or(Profile::Paper);
        let base = TrainConfig::for_profile(profile, &system.system);
        let mut merged = serde_json::to_value(&base)?;
        let obj = merged.as_object_mut().expect("config serializes to an object");
        for (k, v) in self.train {
            if !obj.contains_key(&k) {
                bail!("unknown training option `{k}`");
            }
            obj.insert(k, v);
        }
        let train: TrainConfig = serde_json::from_value(merged).context("training options")?;
        train.validate().map_err(anyhow::Error::msg)?;

        let mut variants = self.variants.unwrap_or_else(|| vec![Variant::Baseline, Variant::Tsnode]);
        if let Some(v) = overrides.variant {
            variants = vec![v];
        }
        if variants.is_empty() {
            bail!("variants must not be empty");
        }
        let mut seeds = self.seeds.unwrap_or_else(|| vec![0]);
        if let Some(s) = overrides.seed {
            seeds = vec![s];
        }
        if seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            bail!("seeds must be distinct");
        }
        if self.sigma_sweep.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            bail!("sigma_sweep values must be positive");
        }
        let output_dir = overrides
            .out
            .clone()
            .or(self.output_dir)
            .unwrap_or_else(|| PathBuf::from("tsnode-out"));
        Ok(ExperimentManifest {
            system,
            profile,
            train,
            variants,
            sigma_sweep: self.sigma_sweep,
            seeds,
            data_seed: self.data_seed,
            output_dir,
        })
    }
}
