//! Experiment configuration: one flat key/value document.
//!
//! A config file names a preset and overrides any subset of its keys:
//!
//! ```toml
//! preset = "desk"
//! num_pilots = 2
//! master_seed = 7
//! ```
//!
//! Unknown keys are rejected so typos cannot silently fall back to defaults.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::channel::{Domain, PathCount};
use crate::error::{Error, Result};
use crate::measurement::PilotScheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Scaled-down defaults that train on a single CPU core.
    Desk,
    /// The full-size experiment grid (far beyond desk hardware).
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config("preset", format!("unknown preset `{other}`"))),
        }
    }
}

/// How per-sample SNRs are assigned within a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnrPolicy {
    /// Sample `i` uses grid entry `i mod len`.
    RoundRobin,
    /// Each sample draws a grid entry uniformly at random.
    Uniform,
}

/// How the generator's input tensor is built from `(Y, P)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionMode {
    /// Matched filter `Y·Pᴴ/Q`.
    MatchedFilter,
    /// Raw `Y` stretched from `Q` to `K` columns by nearest-neighbour
    /// repetition; the pilots enter only implicitly.
    Upsample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

/// Everything needed to reproduce a run. Field names are the config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,

    pub num_antennas: usize,
    pub num_users: usize,
    pub num_pilots: usize,
    pub num_paths: usize,
    /// Draw each user's path count uniformly from `1..=num_paths`.
    pub random_path_count: bool,

    pub snr_grid_db: Vec<f64>,
    pub snr_policy: SnrPolicy,
    pub num_samples: usize,
    pub validation_fraction: f64,
    pub test_samples_per_snr: usize,
    pub pilot_scheme: PilotScheme,
    /// Draw a fresh pilot block for every sample instead of one per run.
    pub redraw_pilots: bool,

    pub master_seed: u64,
    pub split_seed: u64,
    pub eval_seed: u64,

    pub domain: Domain,
    pub output_dir: PathBuf,

    pub condition_mode: ConditionMode,
    pub generator_filters: usize,
    pub discriminator_filters: usize,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub cgan_optimizer: OptimizerKind,
    pub cgan_batch_size: usize,
    pub cgan_epochs: usize,

    pub ridnet_filters: usize,
    pub ridnet_eau_count: usize,
    pub ridnet_learning_rates: Vec<f64>,
    /// Fractions of the epoch budget at which the next learning rate starts.
    pub ridnet_milestones: Vec<f64>,
    pub ridnet_batch_size: usize,
    pub ridnet_epochs: usize,

    /// Pilot counts swept by the pilot-overhead figure.
    pub pilot_sweep: Vec<usize>,
    /// Array sizes swept by the antenna figure.
    pub antenna_sweep: Vec<usize>,

    pub timing_warmup: usize,
    pub timing_iterations: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            num_antennas: 32,
            num_users: 8,
            num_pilots: 4,
            num_paths: 10,
            random_path_count: false,
            snr_grid_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
            snr_policy: SnrPolicy::RoundRobin,
            num_samples: 4000,
            validation_fraction: 0.2,
            test_samples_per_snr: 200,
            pilot_scheme: PilotScheme::QpskRandom,
            redraw_pilots: false,
            master_seed: 20_240_101,
            split_seed: 11,
            eval_seed: 97,
            domain: Domain::Spatial,
            output_dir: PathBuf::from("runs/desk"),
            condition_mode: ConditionMode::MatchedFilter,
            generator_filters: 32,
            discriminator_filters: 64,
            lambda_l1: 100.0,
            lambda_l2: 10.0,
            generator_lr: 2e-4,
            discriminator_lr: 2e-5,
            cgan_optimizer: OptimizerKind::RmsProp,
            cgan_batch_size: 32,
            cgan_epochs: 30,
            ridnet_filters: 8,
            ridnet_eau_count: 4,
            ridnet_learning_rates: vec![1e-4, 1e-5, 1e-6],
            ridnet_milestones: vec![0.5, 0.8],
            ridnet_batch_size: 32,
            ridnet_epochs: 30,
            pilot_sweep: vec![2, 4],
            antenna_sweep: vec![16, 32],
            timing_warmup: 10,
            timing_iterations: 100,
        }
    }

    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            num_antennas: 64,
            num_users: 32,
            num_pilots: 8,
            num_samples: 300_000,
            output_dir: PathBuf::from("runs/paper"),
            generator_filters: 128,
            discriminator_filters: 512,
            ridnet_filters: 64,
            pilot_sweep: vec![2, 4, 6, 8],
            antenna_sweep: vec![64, 128, 192, 256],
            ..Self::desk()
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parse a config document: the named preset (default `desk`) with the
    /// document's keys layered on top.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_str_with_preset(text, None)
    }

    /// Like [`from_toml_str`](Self::from_toml_str), but `preset` (when
    /// given) replaces the document's own `preset` key as the base layer.
    pub fn from_toml_str_with_preset(text: &str, preset: Option<Preset>) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        let preset = match (preset, doc.get("preset")) {
            (Some(p), _) => p,
            (None, None) => Preset::Desk,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(_)) => return Err(Error::config("preset", "must be a string")),
        };
        doc.remove("preset");
        Self::for_preset(preset).with_overrides(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    fn with_overrides(&self, overrides: toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(self)
            .map_err(|e| Error::config("<document>", e.to_string()))?;
        for (key, value) in overrides {
            if !base.contains_key(&key) {
                return Err(Error::config(key, "unknown key"));
            }
            base.insert(key, value);
        }
        let cfg: Self = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| {
            Error::config("<document>", e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Check every cross-field invariant; the error names the first
    /// violated key.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_antennas", self.num_antennas),
            ("num_users", self.num_users),
            ("num_pilots", self.num_pilots),
            ("num_paths", self.num_paths),
            ("num_samples", self.num_samples),
            ("test_samples_per_snr", self.test_samples_per_snr),
            ("generator_filters", self.generator_filters),
            ("discriminator_filters", self.discriminator_filters),
            ("cgan_batch_size", self.cgan_batch_size),
            ("ridnet_filters", self.ridnet_filters),
            ("ridnet_eau_count", self.ridnet_eau_count),
            ("ridnet_batch_size", self.ridnet_batch_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.num_users > self.num_antennas {
            return Err(Error::config(
                "num_users",
                format!(
                    "K <= N violated: {} users exceed {} antennas",
                    self.num_users, self.num_antennas
                ),
            ));
        }
        if self.snr_grid_db.is_empty() || self.snr_grid_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("snr_grid_db", "must be a non-empty list of finite values"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction", "must lie strictly between 0 and 1"));
        }
        let split = split_sizes(self.num_samples, self.validation_fraction);
        if split.0 == 0 || split.1 == 0 {
            return Err(Error::config(
                "num_samples",
                "too few samples for a non-empty train/validation split",
            ));
        }
        if !self.discriminator_filters.is_multiple_of(8) {
            return Err(Error::config("discriminator_filters", "must be a multiple of 8"));
        }
        for (field, v) in [
            ("lambda_l1", self.lambda_l1),
            ("lambda_l2", self.lambda_l2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        for (field, v) in [
            ("generator_lr", self.generator_lr),
            ("discriminator_lr", self.discriminator_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be finite and positive"));
            }
        }
        let lrs = &self.ridnet_learning_rates;
        if lrs.is_empty() || lrs.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config("ridnet_learning_rates", "must be positive and finite"));
        }
        if lrs.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("ridnet_learning_rates", "must be non-increasing"));
        }
        let ms = &self.ridnet_milestones;
        if ms.len() + 1 != lrs.len() {
            return Err(Error::config(
                "ridnet_milestones",
                "needs exactly one fewer entry than ridnet_learning_rates",
            ));
        }
        if ms.iter().any(|m| !(*m > 0.0 && *m < 1.0)) || ms.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(
                "ridnet_milestones",
                "must be strictly increasing fractions in (0, 1)",
            ));
        }
        if self.pilot_sweep.contains(&0) {
            return Err(Error::config("pilot_sweep", "pilot counts must be at least 1"));
        }
        if self.antenna_sweep.iter().any(|&n| n < self.num_users) {
            return Err(Error::config("antenna_sweep", "every array size must be at least num_users"));
        }
        if self.timing_iterations == 0 {
            return Err(Error::config("timing_iterations", "must be at least 1"));
        }
        Ok(())
    }

    pub fn path_count(&self) -> PathCount {
        if self.random_path_count {
            PathCount::UniformUpTo(self.num_paths)
        } else {
            PathCount::Fixed(self.num_paths)
        }
    }

    /// Hex SHA-256 of the canonical serialized config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config always serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Total size of the test corpus.
    pub fn test_samples(&self) -> usize {
        self.test_samples_per_snr * self.snr_grid_db.len()
    }
}

/// `(train, validation)` counts for `m` samples.
pub fn split_sizes(m: usize, fraction: f64) -> (usize, usize) {
    let val = ((m as f64) * fraction).round() as usize;
    let val = val.min(m);
    (m - val, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ExperimentConfig::desk().validate().unwrap();
        ExperimentConfig::paper().validate().unwrap();
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let cfg = ExperimentConfig::from_toml_str("preset = \"paper\"\nnum_pilots = 2\n").unwrap();
        assert_eq!(cfg.num_users, 32);
        assert_eq!(cfg.num_pilots, 2);
        let cfg = ExperimentConfig::from_toml_str("master_seed = 5").unwrap();
        assert_eq!(cfg.preset, Preset::Desk);
        assert_eq!(cfg.master_seed, 5);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        match ExperimentConfig::from_toml_str("num_antenas = 4") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "num_antenas"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn more_users_than_antennas_names_the_invariant() {
        let err = ExperimentConfig::from_toml_str("num_antennas = 4\nnum_users = 8\nantenna_sweep = [4]").unwrap_err();
        assert!(err.to_string().contains("K <= N"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::desk();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn split_sizes_follow_fraction() {
        assert_eq!(split_sizes(10, 0.2), (8, 2));
        assert_eq!(split_sizes(4000, 0.2), (3200, 800));
    }
}
