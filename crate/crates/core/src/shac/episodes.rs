use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cstr_env::{reset, EnvConfig, PlantParams, PlantState, PriceSeries, ResetMode};
use crate::error::{Error, Result};
use crate::mpc_layer::OcpSpec;

/// Plant, controller layout and training prices shared by all environments.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub env: EnvConfig,
    pub plant: PlantParams,
    pub spec: OcpSpec,
    pub prices: PriceSeries,
    /// Control steps per training episode.
    pub episode_len: usize,
    pub reset: ResetMode,
}

impl Scenario {
    pub fn new(env: EnvConfig, spec: OcpSpec, prices: PriceSeries, episode_len: usize) -> Result<Self> {
        let plant = env.plant()?;
        if episode_len == 0 {
            return Err(Error::Invalid("episode length must be >= 1".into()));
        }
        if prices.len() < episode_len + spec.horizon() {
            return Err(Error::Prices(format!(
                "{} hours cannot hold a {episode_len}-step episode plus a {}-hour forecast",
                prices.len(),
                spec.horizon()
            )));
        }
        Ok(Self {
            env,
            plant,
            spec,
            prices,
            episode_len,
            reset: ResetMode::Randomized,
        })
    }

    fn max_start(&self) -> usize {
        self.prices.len() - self.episode_len - self.spec.horizon()
    }
}

/// One environment instance: a fixed-length episode cut from the training
/// prices at a random offset, with its own random stream.
#[derive(Clone, Debug)]
pub struct EpisodeEnv {
    pub state: PlantState,
    /// Offset of the episode in the price series.
    pub start: usize,
    /// Control steps taken in the current episode.
    pub t: usize,
    pub episodes: u64,
    pub rng: ChaCha8Rng,
}

impl EpisodeEnv {
    pub fn new(scenario: &Scenario, seed: u64) -> Self {
        let mut env = Self {
            state: PlantState { c: 0.0, temp: 0.0, storage: 0.0 },
            start: 0,
            t: 0,
            episodes: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.new_episode(scenario);
        env
    }

    pub fn new_episode(&mut self, scenario: &Scenario) {
        self.start = self.rng.random_range(0..=scenario.max_start());
        self.state = reset(&scenario.env, scenario.reset, &mut self.rng);
        self.t = 0;
        self.episodes += 1;
    }

    pub fn price(&self, scenario: &Scenario) -> f64 {
        scenario.prices.prices[self.start + self.t]
    }

    /// Perfect-foresight forecast from the current step on.
    pub fn forecast(&self, scenario: &Scenario) -> Vec<f64> {
        scenario.prices.window(self.start + self.t, scenario.spec.horizon())
    }

    /// Forecast as seen one step later, within the same episode.
    pub fn next_forecast(&self, scenario: &Scenario) -> Vec<f64> {
        scenario.prices.window(self.start + self.t + 1, scenario.spec.horizon())
    }

    pub fn at_episode_end(&self, scenario: &Scenario) -> bool {
        self.t >= scenario.episode_len
    }
}
