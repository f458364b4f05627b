//! Fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adgraph::Tensor;
use crate::cstr_env::{synth_prices, EnvConfig, SynthPriceConfig};
use crate::koopman::{KoopmanConfig, KoopmanModel, Normalizer};
use crate::mpc_layer::{OcpConfig, OcpSpec, QpSettings};
use crate::shac::Scenario;

pub fn test_norm() -> Normalizer {
    Normalizer {
        state_mean: [0.14, 0.73],
        state_scale: [0.05, 0.08],
        input_mean: [1.0, 350.0],
        input_scale: [0.12, 200.0],
    }
}

/// Random encoder with mildly contracting latent dynamics and a decoder fitted
/// around the operating region.
pub fn test_model(seed: u64) -> KoopmanModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = KoopmanModel::new(KoopmanConfig::default(), test_norm(), &mut rng);
    let n = m.latent_dim();
    let a: Vec<f64> = (0..n * n)
        .map(|i| if i % (n + 1) == 0 { 0.9 } else { 0.0 } + rng.random_range(-0.03..0.03))
        .collect();
    m.params.insert("A", Tensor::matrix(n, n, a));
    m.params.insert("B", Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.random_range(-0.1..0.1)).collect()));
    let xs: Vec<[f64; 2]> = (0..200).map(|_| [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)]).collect();
    m.fit_decoder(&xs);
    m
}

/// Default plant and controller on 400 h of synthetic prices, 24-step episodes.
pub fn test_scenario(tol: f64) -> Scenario {
    let env = EnvConfig::default();
    let ocp = OcpConfig {
        qp: QpSettings { tol, max_iter: 200 },
        ..OcpConfig::default()
    };
    let spec = OcpSpec::new(ocp, &env).unwrap();
    let prices = synth_prices(400, &SynthPriceConfig::default(), &mut ChaCha8Rng::seed_from_u64(5));
    Scenario::new(env, spec, prices, 24).unwrap()
}
