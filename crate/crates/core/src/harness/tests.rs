use proptest::prelude::*;

use super::*;
use crate::cstr_env::{synth_prices, ControlInput, EnvConfig, PlantState, PriceSeries, ResetMode, SynthPriceConfig};
use crate::error::{Error, Result};
use crate::shac::ShacConfig;
use crate::test_support::{test_model, test_scenario};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prices(n: usize) -> PriceSeries {
    synth_prices(n, &SynthPriceConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
}

#[test]
fn default_config_roundtrips_through_toml() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
}

#[test]
fn config_errors_name_the_key_path() {
    let path = |text: &str| match RunConfig::from_toml(text) {
        Err(Error::Config { path, .. }) => path,
        other => panic!("expected a config error, got {other:?}"),
    };
    assert_eq!(path("[ppo]\nclip_ratio = 0.2\n"), "ppo.clip_ratio");
    assert_eq!(path("[env.c_bounds]\nlo = \"x\"\n"), "env.c_bounds.lo");
    assert_eq!(path("[ocp.qp]\nmax_iter = -1\n"), "ocp.qp.max_iter");
    assert_eq!(path("[shac]\ngamma = 1.5\n"), "shac.gamma");
    assert_eq!(path("[ppo]\nclip = 1.0\n"), "ppo.clip");
    assert_eq!(path("episode_len = 0\n"), "episode_len");
    assert_eq!(path("unknown_top = 1\n"), "unknown_top");
}

#[test]
fn nominal_controls_give_unit_cost_ratio() {
    let env = EnvConfig::default();
    let mut c = ConstantController(env.steady_input());
    let r = evaluate(&mut c, &env, 9, &prices(48), None, ResetMode::SteadyState).unwrap();
    assert_eq!(r.completed, 48);
    assert!((r.cost_ratio - 1.0).abs() < 1e-12);
    assert_eq!(r.violation_pct, 0.0);
    assert_eq!(r.mean_violation, 0.0);
    assert_eq!(r.schema_version, EVAL_SCHEMA_VERSION);
}

#[test]
fn zero_flow_gives_zero_cost_ratio() {
    let env = EnvConfig::default();
    let mut c = ConstantController(ControlInput { rho: env.steady.rho, flow: 0.0 });
    let r = evaluate(&mut c, &env, 9, &prices(12), None, ResetMode::SteadyState).unwrap();
    assert_eq!(r.cost_ratio, 0.0);
}

#[test]
fn three_hour_series_gives_three_steps() {
    let env = EnvConfig::default();
    let p = crate::cstr_env::parse_prices("timestamp,price\n2021-01-01T00:00,10\n2021-01-01T01:00,20\n2021-01-01T02:00,30\n").unwrap();
    let mut c = ConstantController(env.steady_input());
    let r = evaluate(&mut c, &env, 9, &p, None, ResetMode::SteadyState).unwrap();
    assert_eq!((r.steps, r.completed, r.log.len()), (3, 3, 3));
    assert!(evaluate(&mut c, &env, 9, &p, Some(4), ResetMode::SteadyState).is_err());
}

struct FailsAt(usize, usize);

impl Controller for FailsAt {
    fn name(&self) -> String {
        "fails".into()
    }

    fn act(&mut self, _: &PlantState, _: &[f64]) -> Result<ControlInput> {
        self.1 += 1;
        if self.1 > self.0 {
            Err(Error::Invalid("solver gave up".into()))
        } else {
            Ok(EnvConfig::default().steady_input())
        }
    }
}

#[test]
fn solver_failure_yields_partial_report() {
    let env = EnvConfig::default();
    let r = evaluate(&mut FailsAt(5, 0), &env, 9, &prices(20), None, ResetMode::SteadyState).unwrap();
    assert_eq!((r.steps, r.completed), (20, 5));
    assert!(r.aborted.as_deref().unwrap().starts_with("step 5:"));
    assert!((r.cost_ratio - 1.0).abs() < 1e-12);
}

#[test]
fn controller_report_is_reproducible_from_its_log() {
    let sc = test_scenario(1e-8);
    let model = test_model(5);
    let mut c = ModelController {
        model: &model,
        spec: &sc.spec,
        label: "test".into(),
    };
    let r = evaluate(&mut c, &sc.env, sc.spec.horizon(), &prices(24), None, ResetMode::SteadyState).unwrap();
    assert_eq!(r.completed, 24);
    assert_eq!(Metrics::from_log(&r.log, sc.env.steady.flow), r.metrics());
    let pct = 100.0 * r.log.iter().filter(|s| s.violated()).count() as f64 / 24.0;
    assert_eq!(pct, r.violation_pct);
}

#[test]
fn report_json_roundtrips() {
    let env = EnvConfig::default();
    let mut c = ConstantController(ControlInput { rho: 0.9, flow: 500.0 });
    let r = evaluate(&mut c, &env, 9, &prices(10), None, ResetMode::SteadyState).unwrap();
    assert!(r.violation_pct > 0.0 && r.mean_violation > 0.0);
    let dir = tempfile::tempdir().unwrap();
    r.save(dir.path(), "eval").unwrap();
    let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(back, r);
    assert!(dir.path().join("eval_log.csv").exists());
}

#[test]
fn cosine_similarity_examples() {
    let v = [1.0, -2.0, 3.0];
    assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
    assert!((cosine_similarity(&v, &[-1.0, 2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
    assert!(cosine_similarity(&v, &[0.0; 3]).is_err());
    assert!(cosine_similarity(&v, &[1.0]).is_err());
}

#[test]
fn pairwise_similarity_examples() {
    let g = vec![vec![1.0, 2.0]; 5];
    let s = mean_pairwise_similarity(&g).unwrap();
    assert!((s.mean - 1.0).abs() < 1e-15);
    assert_eq!(s.pairs, 10);

    let two = vec![vec![1.0, 2.0, 0.5], vec![-0.3, 1.0, 4.0]];
    let s = mean_pairwise_similarity(&two).unwrap();
    assert_eq!(s.pairs, 1);
    assert_eq!(s.mean, cosine_similarity(&two[0], &two[1]).unwrap());

    let with_zero = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]];
    let s = mean_pairwise_similarity(&with_zero).unwrap();
    assert_eq!((s.used, s.excluded.clone(), s.mean), (2, vec![1], 0.0));
    assert!(mean_pairwise_similarity(&[vec![0.0], vec![1.0]]).is_err());
}

#[test]
fn curve_summary_compares_first_and_last_decile() {
    let curve: Vec<_> = (0..20)
        .map(|i| crate::shac::CurveRow {
            update: i,
            steps: i,
            mean_reward: 0.0,
            run_avg_1024: i as f64,
        })
        .collect();
    let s = CurveSummary::from_curve(&curve);
    assert_eq!((s.first_decile, s.last_decile), (0.5, 18.5));
    assert!(s.improved());
}

#[test]
fn deterministic_shac_study_gives_unit_similarity() {
    let sc = test_scenario(1e-8);
    let cfg = ShacConfig {
        horizon: 2,
        n_envs: 1,
        explore: false,
        critic_hidden: vec![8],
        critic_iterations: 1,
        critic_minibatches: 1,
        ..ShacConfig::default()
    };
    let setup = StudySetup {
        n_gradients: 3,
        critic_updates: 2,
        fixed_start: true,
    };
    let r = shac_gradient_study(sc, test_model(6), &cfg, &setup).unwrap();
    assert_eq!(r.critic_losses.len(), 2);
    assert!(r.similarity.mean > 0.99, "{:?}", r.similarity);
    assert!(r.grad_norms.iter().all(|n| *n > 0.0));
}

#[test]
fn ppo_study_records_requested_gradients() {
    let sc = test_scenario(1e-8);
    let cfg = crate::ppo::PpoConfig {
        rollout: 4,
        n_envs: 2,
        minibatch: 4,
        epochs: 1,
        critic_hidden: vec![8],
        ..crate::ppo::PpoConfig::default()
    };
    let setup = StudySetup {
        n_gradients: 3,
        critic_updates: 1,
        fixed_start: false,
    };
    let r = ppo_gradient_study(sc, test_model(7), &cfg, &setup).unwrap();
    assert_eq!(r.requested, 3);
    assert_eq!(r.similarity.used + r.similarity.excluded.len(), 3);
    assert!((-1.0..=1.0).contains(&r.similarity.mean));
}

proptest! {
    #[test]
    fn cosine_similarity_is_bounded(
        v in prop::collection::vec(-10.0..10.0f64, 4),
        w in prop::collection::vec(-10.0..10.0f64, 4),
    ) {
        prop_assume!(v.iter().any(|x| *x != 0.0) && w.iter().any(|x| *x != 0.0));
        let s = cosine_similarity(&v, &w).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - cosine_similarity(&w, &v).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn flows_at_most_nominal_never_cost_more(flows in prop::collection::vec(0.0..=390.0f64, 6)) {
        struct Schedule(Vec<f64>, usize);
        impl Controller for Schedule {
            fn name(&self) -> String { "schedule".into() }
            fn act(&mut self, _: &PlantState, _: &[f64]) -> Result<ControlInput> {
                self.1 += 1;
                Ok(ControlInput { rho: 1.0, flow: self.0[self.1 - 1] })
            }
        }
        let env = EnvConfig::default();
        let r = evaluate(&mut Schedule(flows, 0), &env, 9, &prices(6), None, ResetMode::SteadyState).unwrap();
        prop_assert!(r.cost_ratio <= 1.0 + 1e-12);
        prop_assert!((0.0..=100.0).contains(&r.violation_pct) && r.mean_violation >= 0.0);
    }
}
