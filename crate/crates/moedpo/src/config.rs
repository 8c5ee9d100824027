//! Run configuration: a versioned TOML document with strict keys, plus
//! command-line overrides.

use std::path::Path;

use moedpo_core::em::{Algorithm, Mode, TrainerConfig};
use moedpo_core::model::ModelInit;
use moedpo_core::relax::TauSchedule;
use moedpo_core::synth::{GroundTruthConfig, PairSampling};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    /// Root seed; every random stream of a run derives from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainerConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainerConfig::default(),
        }
    }
}

/// Synthetic data generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_experts: usize,
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub separation: f64,
    pub own_mass: f64,
    pub feature_noise: f64,
    pub reference_scale: f64,
    pub pair_sampling: PairSampling,
    pub num_triplets: usize,
    /// The last `holdout_prompts` prompts get no training triplets.
    pub holdout_prompts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_experts: 3,
            num_prompts: 30,
            vocab_size: 8,
            separation: 3.0,
            own_mass: 0.8,
            feature_noise: 0.1,
            reference_scale: 0.5,
            pair_sampling: PairSampling::Uniform,
            num_triplets: 5000,
            holdout_prompts: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// One reference shared by every expert.
    #[default]
    Shared,
    /// The shared reference with independent logit noise per expert.
    PerExpert,
}

/// Model initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub init: ModelInit,
    pub reference: ReferenceMode,
    /// Logit noise scale for per-expert references.
    pub reference_noise: f64,
    /// Scale of the uniform initial weights of a linear gate.
    pub gate_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            init: ModelInit::default(),
            reference: ReferenceMode::Shared,
            reference_noise: 0.3,
            gate_init_scale: 0.1,
        }
    }
}

/// Values given on the command line; `None` keeps the file value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub algorithm: Option<Algorithm>,
    pub mode: Option<Mode>,
    pub epochs: Option<u64>,
    pub beta: Option<f64>,
    pub tau: Option<f64>,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(a) = o.algorithm {
            self.train.algorithm = a;
        }
        if let Some(m) = o.mode {
            self.train.mode = m;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(b) = o.beta {
            self.train.hyper.beta = b;
        }
        if let Some(t) = o.tau {
            self.train.mc.tau = TauSchedule::Constant { tau: t };
        }
    }

    /// Trainer settings with the seed taken from the root seed.
    pub fn trainer(&self) -> TrainerConfig {
        let mut t = self.train.clone();
        t.seed = derive_seed(self.seed, Stream::Train);
        t
    }

    pub fn ground_truth(&self) -> GroundTruthConfig {
        let d = &self.data;
        let mut g = GroundTruthConfig::new(
            d.num_experts,
            d.num_prompts,
            d.vocab_size,
            d.separation,
            derive_seed(self.seed, Stream::GroundTruth),
        );
        g.own_mass = d.own_mass;
        g.feature_noise = d.feature_noise;
        g.reference_scale = d.reference_scale;
        g.pair_sampling = d.pair_sampling;
        g
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.ground_truth().validate()?;
        self.trainer().validate()?;
        if self.data.num_triplets == 0 {
            return Err(CliError::Config("data.num_triplets must be positive".into()));
        }
        if self.data.holdout_prompts >= self.data.num_prompts {
            return Err(CliError::Config("holdout_prompts must leave at least one training prompt".into()));
        }
        if !(self.model.gate_init_scale >= 0.0) || !(self.model.reference_noise >= 0.0) {
            return Err(CliError::Config("model scales must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Independent random streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    GroundTruth,
    Sampling,
    Init,
    Train,
    Verify,
}

/// SplitMix64 of the root seed offset by the stream index.
pub fn derive_seed(root: u64, stream: Stream) -> u64 {
    let mut z = root.wrapping_add((stream as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = Config::from_toml_str("schema_version = 1\n").unwrap();
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml_str("schema_version = 1\nfoo = 2\n").is_err());
        assert!(Config::from_toml_str("schema_version = 1\n[train]\nepoch = 3\n").is_err());
        assert!(Config::from_toml_str("schema_version = 1\n[train.hyper]\nbeta = 1.0\nbogus = 1\n").is_err());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        assert!(Config::from_toml_str("schema_version = 2\n").is_err());
        assert!(Config::from_toml_str("seed = 1\n").is_err());
    }

    #[test]
    fn nested_values_parse() {
        let text = r#"
schema_version = 1
seed = 9
[data]
num_experts = 2
[train]
mode = "moe"
algorithm = "em-regularized"
epochs = 7
[train.hyper]
beta = 0.5
lr = { kind = "constant", eta = 3.0 }
[train.mc]
tau = { kind = "exponential", start = 2.0, end = 0.5 }
"#;
        let cfg = Config::from_toml_str(text).unwrap();
        assert_eq!(cfg.data.num_experts, 2);
        assert_eq!(cfg.train.mode, Mode::Moe);
        assert_eq!(cfg.train.algorithm, Algorithm::EmRegularized);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.hyper.beta, 0.5);
        assert_eq!(cfg.trainer().seed, derive_seed(9, Stream::Train));
    }

    #[test]
    fn overrides_win() {
        let mut cfg = Config::default();
        cfg.apply(&Overrides {
            seed: Some(4),
            epochs: Some(2),
            beta: Some(0.7),
            tau: Some(0.2),
            mode: Some(Mode::Moe),
            algorithm: Some(Algorithm::Mc),
        });
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.hyper.beta, 0.7);
        assert_eq!(cfg.train.mc.tau, TauSchedule::Constant { tau: 0.2 });
        assert_eq!(cfg.train.mode, Mode::Moe);
        assert_eq!(cfg.train.algorithm, Algorithm::Mc);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = Config::default();
        let back = Config::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn streams_differ() {
        assert_ne!(derive_seed(0, Stream::Train), derive_seed(0, Stream::Init));
        assert_ne!(derive_seed(0, Stream::Train), derive_seed(1, Stream::Train));
    }
}
