use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cstr_env::{load_prices, synth_prices, EnvConfig, PriceSeries, ResetMode, SynthPriceConfig};
use crate::error::{Error, Result};
use crate::koopman::{DatasetConfig, SiConfig};
use crate::mpc_layer::{OcpConfig, OcpSpec};
use crate::ppo::PpoConfig;
use crate::shac::{Scenario, ShacConfig};

/// Price sources for training and testing. CSV paths take precedence over
/// the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceConfig {
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub synth: SynthPriceConfig,
    pub train_hours: usize,
    pub test_hours: usize,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for PriceConfig {
    fn default() -> Self {
        Self {
            train_csv: None,
            test_csv: None,
            synth: SynthPriceConfig::default(),
            train_hours: 8760,
            test_hours: 4380,
            train_seed: 11,
            test_seed: 99,
        }
    }
}

impl PriceConfig {
    pub fn train(&self) -> Result<PriceSeries> {
        match &self.train_csv {
            Some(p) => load_prices(p),
            None => Ok(synth_prices(self.train_hours, &self.synth, &mut ChaCha8Rng::seed_from_u64(self.train_seed))),
        }
    }

    pub fn test(&self) -> Result<PriceSeries> {
        match &self.test_csv {
            Some(p) => load_prices(p),
            None => Ok(synth_prices(self.test_hours, &self.synth, &mut ChaCha8Rng::seed_from_u64(self.test_seed))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Control steps to simulate; `None` runs the whole test series.
    pub steps: Option<usize>,
    pub initial: ResetMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: None,
            initial: ResetMode::SteadyState,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradStudyConfig {
    pub n_gradients: usize,
    /// Critic updates on frozen-policy rollouts before recording.
    pub critic_updates: usize,
    /// Environment steps behind each recorded PPO gradient.
    pub ppo_batch: usize,
}

impl Default for GradStudyConfig {
    fn default() -> Self {
        Self {
            n_gradients: 100,
            critic_updates: 200,
            ppo_batch: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiRunConfig {
    pub train: SiConfig,
    /// One model is trained per seed; the lowest validation loss wins.
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub dataset_seed: u64,
}

impl Default for SiRunConfig {
    fn default() -> Self {
        Self {
            train: SiConfig::default(),
            seeds: (0..10).collect(),
            dataset: DatasetConfig::default(),
            dataset_seed: 2024,
        }
    }
}

/// Every knob of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub ocp: OcpConfig,
    pub si: SiRunConfig,
    pub shac: ShacConfig,
    pub ppo: PpoConfig,
    pub prices: PriceConfig,
    /// Control steps per training episode.
    pub episode_len: usize,
    pub eval: EvalConfig,
    pub grad_study: GradStudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            ocp: OcpConfig::default(),
            si: SiRunConfig::default(),
            shac: ShacConfig::default(),
            ppo: PpoConfig::default(),
            prices: PriceConfig::default(),
            episode_len: 240,
            eval: EvalConfig::default(),
            grad_study: GradStudyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; errors name the offending key path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            path: "<root>".into(),
            msg: e.to_string(),
        })?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { "<root>".into() } else { path },
                msg: e.into_inner().message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ocp.validate()?;
        self.shac.validate()?;
        self.ppo.validate()?;
        let err = |path: &str, msg: &str| Error::Config {
            path: path.into(),
            msg: msg.into(),
        };
        if self.si.seeds.is_empty() {
            return Err(err("si.seeds", "needs at least one seed"));
        }
        if self.si.train.batch == 0 || self.si.train.horizon == 0 {
            return Err(err("si.train.batch", "batch and horizon must be >= 1"));
        }
        if !(self.si.train.lr > 0.0) {
            return Err(err("si.train.lr", "must be > 0"));
        }
        if self.episode_len == 0 {
            return Err(err("episode_len", "must be >= 1"));
        }
        if self.grad_study.n_gradients < 2 {
            return Err(err("grad_study.n_gradients", "needs at least two gradients"));
        }
        if self.grad_study.ppo_batch == 0 {
            return Err(err("grad_study.ppo_batch", "must be >= 1"));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<OcpSpec> {
        OcpSpec::new(self.ocp.clone(), &self.env)
    }

    /// Training scenario on the configured training prices.
    pub fn scenario(&self) -> Result<Scenario> {
        Scenario::new(self.env.clone(), self.spec()?, self.prices.train()?, self.episode_len)
    }
}
